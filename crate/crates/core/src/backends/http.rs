use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::Value;
use url::Url;

use super::{BackendConfig, Transport, TransportError};
use crate::error::{Error, Result};

/// JSON-over-HTTP POST transport.
pub struct HttpTransport {
    client: Client,
    endpoint: Url,
    auth_token: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| Error::Config(format!("cannot build http client: {e}")))?;
        Ok(Self {
            client,
            endpoint: config.endpoint.clone(),
            auth_token: config.auth_token.clone(),
        })
    }
}

fn classify(status: StatusCode) -> Option<TransportError> {
    if status.is_success() {
        None
    } else if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
        Some(TransportError::Transient(format!("HTTP {status}")))
    } else {
        Some(TransportError::Fatal(format!("HTTP {status}")))
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &Value) -> std::result::Result<Value, TransportError> {
        let mut builder = self.client.post(self.endpoint.clone()).json(request);
        if let Some(token) = &self.auth_token {
            builder = builder.bearer_auth(token);
        }
        let response = builder
            .send()
            .map_err(|e| TransportError::Transient(format!("request to {} failed: {e}", self.endpoint)))?;
        if let Some(err) = classify(response.status()) {
            return Err(err);
        }
        let bytes = response
            .bytes()
            .map_err(|e| TransportError::Transient(format!("reading body failed: {e}")))?;
        serde_json::from_slice(&bytes).map_err(|e| TransportError::Fatal(format!("response is not json: {e}")))
    }
}
