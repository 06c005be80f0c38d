//! Minimal JSON-over-HTTP POST client shared by the remote generator and
//! judge. Desk-scale: blocking, one request at a time, immediate retries.

use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("POST {url} failed after {attempts} attempt(s): {last}")]
    Exhausted {
        url: String,
        attempts: u32,
        last: String,
    },
    #[error("POST {url}: status {status}")]
    Status { url: String, status: u16 },
    #[error("POST {url}: {source}")]
    Transport {
        url: String,
        #[source]
        source: Box<ureq::Error>,
    },
}

/// Endpoint settings. The bearer token, if any, comes from the named
/// environment variable so credentials never land in config files.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub url: String,
    pub timeout_secs: u64,
    /// Additional attempts after the first failure.
    pub retries: u32,
    pub token_env: &'static str,
}

impl Endpoint {
    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into()
    }

    /// POST `body` as JSON and parse the JSON response. Retries transport
    /// failures and 5xx responses up to `retries` extra times; 4xx responses
    /// fail immediately (retrying a rejected request cannot help).
    pub fn post_json(&self, body: &serde_json::Value) -> Result<serde_json::Value, HttpError> {
        let agent = self.agent();
        let attempts = self.retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            let mut request = agent.post(&self.url).header("Content-Type", "application/json");
            if let Ok(token) = std::env::var(self.token_env) {
                request = request.header("Authorization", &format!("Bearer {token}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if (200..300).contains(&status) {
                        return response.body_mut().read_json().map_err(|e| {
                            HttpError::Transport {
                                url: self.url.clone(),
                                source: Box::new(e),
                            }
                        });
                    }
                    if (400..500).contains(&status) {
                        return Err(HttpError::Status {
                            url: self.url.clone(),
                            status,
                        });
                    }
                    last = format!("status {status}");
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(HttpError::Exhausted {
            url: self.url.clone(),
            attempts,
            last,
        })
    }
}

#[cfg(test)]
pub(crate) mod test_server {
    //! Single-shot HTTP/1.1 responder for exercising the remote clients
    //! without a real service. Each call to [`serve`] answers a scripted
    //! sequence of responses on a fresh port and records request bodies.

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    pub struct Script {
        /// (status line suffix, body) per successive request.
        pub responses: Vec<(u16, String)>,
    }

    pub struct Served {
        pub url: String,
        pub requests: mpsc::Receiver<(String, String)>, // (headers, body)
        pub handle: thread::JoinHandle<()>,
    }

    pub fn serve(script: Script) -> Served {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        let handle = thread::spawn(move || {
            for (status, body) in script.responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut body_buf = vec![0u8; content_length];
                reader.read_exact(&mut body_buf).unwrap();
                tx.send((headers, String::from_utf8(body_buf).unwrap()))
                    .unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        Served {
            url,
            requests: rx,
            handle,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_server::{serve, Script};
    use super::*;

    fn endpoint(url: &str, retries: u32) -> Endpoint {
        Endpoint {
            url: url.to_string(),
            timeout_secs: 5,
            retries,
            token_env: "CST_TEST_TOKEN_UNSET",
        }
    }

    #[test]
    fn posts_json_and_reads_reply() {
        let server = serve(Script {
            responses: vec![(200, r#"{"ok":true}"#.into())],
        });
        let reply = endpoint(&server.url, 0)
            .post_json(&serde_json::json!({"k": "v"}))
            .unwrap();
        assert_eq!(reply["ok"], true);
        let (_, body) = server.requests.recv().unwrap();
        // The exact whitespace of the serialized body is not part of the
        // contract; the parsed payload is.
        let sent: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(sent, serde_json::json!({"k": "v"}));
        server.handle.join().unwrap();
    }

    #[test]
    fn retries_5xx_then_succeeds() {
        let server = serve(Script {
            responses: vec![(500, "oops".into()), (200, r#"{"ok":1}"#.into())],
        });
        let reply = endpoint(&server.url, 2)
            .post_json(&serde_json::json!({}))
            .unwrap();
        assert_eq!(reply["ok"], 1);
        server.handle.join().unwrap();
    }

    #[test]
    fn gives_up_after_retry_budget() {
        let server = serve(Script {
            responses: vec![(500, "a".into()), (502, "b".into())],
        });
        let err = endpoint(&server.url, 1)
            .post_json(&serde_json::json!({}))
            .unwrap_err();
        assert!(err.to_string().contains("after 2 attempt(s)"), "{err}");
        server.handle.join().unwrap();
    }

    #[test]
    fn client_errors_fail_fast() {
        let server = serve(Script {
            responses: vec![(403, "denied".into())],
        });
        let err = endpoint(&server.url, 5)
            .post_json(&serde_json::json!({}))
            .unwrap_err();
        assert!(err.to_string().contains("status 403"), "{err}");
        server.handle.join().unwrap();
    }

    #[test]
    fn bearer_token_comes_from_env() {
        let server = serve(Script {
            responses: vec![(200, "{}".into())],
        });
        let mut ep = endpoint(&server.url, 0);
        ep.token_env = "CST_HTTP_TEST_TOKEN";
        std::env::set_var("CST_HTTP_TEST_TOKEN", "sekrit");
        ep.post_json(&serde_json::json!({})).unwrap();
        std::env::remove_var("CST_HTTP_TEST_TOKEN");
        let (headers, _) = server.requests.recv().unwrap();
        assert!(
            headers.to_ascii_lowercase().contains("authorization: bearer sekrit"),
            "{headers}"
        );
        server.handle.join().unwrap();
    }
}
