//! Shared-secret signatures for callback bodies.

use hmac::{Hmac, Mac};
use sha2::Sha256;

/// Header carrying the hex signature of the request body.
pub const SIGNATURE_HEADER: &str = "x-detstream-signature";

type HmacSha256 = Hmac<Sha256>;

/// Hex HMAC-SHA-256 of `body` under `secret`.
pub fn sign_body(secret: &[u8], body: &[u8]) -> String {
    let mut mac = HmacSha256::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(body);
    hex::encode(mac.finalize().into_bytes())
}

/// Constant-time check of a hex signature. Malformed hex is simply false.
pub fn verify_body(secret: &[u8], body: &[u8], signature: &str) -> bool {
    let Ok(sig) = hex::decode(signature.trim()) else {
        return false;
    };
    let mut mac = HmacSha256::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(body);
    mac.verify_slice(&sig).is_ok()
}
