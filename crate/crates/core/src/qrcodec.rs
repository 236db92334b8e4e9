//! Text envelope carried by QR codes.
//!
//! `COVC1.<base64url(body)>.<base64url(check)>` where `body` is the
//! sorted-key compact JSON of a [`QrPayload`] and `check` is the first 8
//! bytes of SHA-256 over the body JSON bytes. base64url is unpadded. The
//! whole text must fit in a version-40 byte-mode QR code (2953 bytes).

use serde::{Deserialize, Serialize};

use crate::credential::{ClaimValue, Disclosed, Presentation, PHOTO_CLAIM};
use crate::crypto::{digest, Did};
use crate::encoding::{b64url, b64url_decode, to_canonical_json};

pub const PREFIX: &str = "COVC1.";
pub const QR_CAPACITY: usize = 2953;
pub const ENVELOPE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QrError {
    #[error("payload needs {size} bytes, QR capacity is {QR_CAPACITY}; leave the photo out of the presentation")]
    PayloadTooLarge { size: usize },
    #[error("not a covcert envelope")]
    NotOurCode,
    #[error("envelope integrity check failed")]
    CorruptPayload,
    #[error("envelope body malformed: {0}")]
    MalformedPayload(String),
    #[error("photo-bound certificate needs the holder photo for printing")]
    PhotoRequired,
    #[error("only presentations can be printed")]
    NotAPresentation,
}

/// Handed to an issuer at the counter: lets them find the holder's pod.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityToken {
    pub holder: Did,
}

/// Label for a physical sample sent to an off-site lab. Carries no claims.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTag {
    pub sample_id: String,
    pub holder_did: Did,
    pub pending_cert_id: Did,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum QrBody {
    Presentation(Presentation),
    Identity(IdentityToken),
    SampleTag(SampleTag),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrPayload {
    pub version: u32,
    #[serde(flatten)]
    pub body: QrBody,
    pub anchor_url: String,
}

impl QrPayload {
    pub fn presentation(p: Presentation) -> Self {
        QrPayload {
            version: ENVELOPE_VERSION,
            anchor_url: p.anchor_url.clone(),
            body: QrBody::Presentation(p),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            QrBody::Presentation(_) => "presentation",
            QrBody::Identity(_) => "identity",
            QrBody::SampleTag(_) => "sample_tag",
        }
    }
}

pub fn encode(payload: &QrPayload) -> Result<String, QrError> {
    let body = to_canonical_json(payload).map_err(|e| QrError::MalformedPayload(e.to_string()))?;
    let check = &digest(body.as_bytes()).0[..8];
    let text = format!("{PREFIX}{}.{}", b64url(body.as_bytes()), b64url(check));
    if text.len() > QR_CAPACITY {
        return Err(QrError::PayloadTooLarge { size: text.len() });
    }
    Ok(text)
}

pub fn decode(text: &str) -> Result<QrPayload, QrError> {
    let rest = text.strip_prefix(PREFIX).ok_or(QrError::NotOurCode)?;
    let (body_b64, check_b64) = rest.split_once('.').ok_or(QrError::CorruptPayload)?;
    let body = b64url_decode(body_b64).map_err(|_| QrError::CorruptPayload)?;
    let check = b64url_decode(check_b64).map_err(|_| QrError::CorruptPayload)?;
    if check.as_slice() != &digest(&body).0[..8] {
        return Err(QrError::CorruptPayload);
    }
    let payload: QrPayload =
        serde_json::from_slice(&body).map_err(|e| QrError::MalformedPayload(e.to_string()))?;
    if payload.version != ENVELOPE_VERSION {
        return Err(QrError::MalformedPayload(format!("unsupported version {}", payload.version)));
    }
    Ok(payload)
}

/// Print layout for the paper variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperDocument {
    pub title: String,
    #[serde(with = "opt_b64")]
    pub photo: Option<Vec<u8>>,
    pub qr_text: String,
    /// Human-readable lines for the revealed claims.
    pub summary: Vec<(String, String)>,
    pub anchor_url: String,
}

mod opt_b64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|b| crate::encoding::b64url(b)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|t| crate::encoding::b64url_decode(&t).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Lays out a printable certificate. The QR text is exactly what [`encode`]
/// produces for the same payload.
pub fn render_paper(payload: &QrPayload, holder_photo: Option<&[u8]>) -> Result<PaperDocument, QrError> {
    let QrBody::Presentation(pres) = &payload.body else {
        return Err(QrError::NotAPresentation);
    };
    let cert = &pres.certificate;
    if cert.photo_bound && holder_photo.is_none() {
        return Err(QrError::PhotoRequired);
    }
    let qr_text = encode(payload)?;
    let summary = pres
        .revealed
        .iter()
        .filter(|r| r.name != PHOTO_CLAIM)
        .map(|r| {
            let shown = match &r.value {
                Disclosed::Inline(ClaimValue::Text(t)) => t.clone(),
                Disclosed::Inline(ClaimValue::Bytes(b)) => format!("<{} bytes>", b.len()),
                Disclosed::External(loc) => format!("<see {loc}>"),
            };
            (r.name.clone(), shown)
        })
        .collect();
    Ok(PaperDocument {
        title: format!("Certificate {}", cert.id),
        photo: if cert.photo_bound {
            holder_photo.map(<[u8]>::to_vec)
        } else {
            None
        },
        qr_text,
        summary,
        anchor_url: payload.anchor_url.clone(),
    })
}
