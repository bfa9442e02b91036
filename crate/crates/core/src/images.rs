//! Image byte loading from `data:` URIs, local paths, `file://` and
//! `http(s)://` locators.

use base64::Engine as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ImageLoader {
    client: reqwest::Client,
}

impl ImageLoader {
    pub fn new() -> Self {
        Self::default()
    }

    pub async fn load(&self, uri: &str) -> Result<Vec<u8>> {
        let fail = |message: String| Error::ImageLoad {
            uri: uri.chars().take(120).collect(),
            message,
        };
        if let Some(rest) = uri.strip_prefix("data:") {
            return decode_data_uri(rest).map_err(fail);
        }
        if uri.starts_with("http://") || uri.starts_with("https://") {
            let resp = self
                .client
                .get(uri)
                .send()
                .await
                .map_err(|e| fail(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(fail(format!("HTTP {}", resp.status())));
            }
            let bytes = resp.bytes().await.map_err(|e| fail(e.to_string()))?;
            return Ok(bytes.to_vec());
        }
        let path = uri.strip_prefix("file://").unwrap_or(uri);
        tokio::fs::read(path).await.map_err(|e| fail(e.to_string()))
    }
}

fn decode_data_uri(rest: &str) -> std::result::Result<Vec<u8>, String> {
    let (meta, data) = rest.split_once(',').ok_or("data URI without comma")?;
    if meta.ends_with(";base64") {
        base64::engine::general_purpose::STANDARD
            .decode(data.trim())
            .map_err(|e| e.to_string())
    } else {
        Ok(data.as_bytes().to_vec())
    }
}

/// MIME type declared by a `data:` URI, if any.
pub fn data_uri_mime(uri: &str) -> Option<&str> {
    let meta = uri.strip_prefix("data:")?.split_once(',')?.0;
    let mime = meta.split(';').next()?;
    (!mime.is_empty()).then_some(mime)
}

pub fn data_uri(mime: &str, bytes: &[u8]) -> String {
    format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    )
}

/// Sniffs common image formats from magic bytes.
pub fn guess_mime(bytes: &[u8]) -> &'static str {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => "image/png",
        [0xff, 0xd8, 0xff, ..] => "image/jpeg",
        [b'G', b'I', b'F', b'8', ..] => "image/gif",
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => "image/webp",
        [b'B', b'M', ..] => "image/bmp",
        _ => "application/octet-stream",
    }
}
