//! Token generation. All randomness in the plane flows through one seeded
//! generator so that scripted runs are reproducible.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::types::{CommandId, ConsentId, Pseudonym, RequestId, RestrictionId};

#[derive(Debug, Clone)]
pub struct IdGenerator {
    rng: ChaCha20Rng,
}

impl IdGenerator {
    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn from_entropy() -> Self {
        Self {
            rng: ChaCha20Rng::from_entropy(),
        }
    }

    /// 128 random bits, URL-safe base64 without padding: 22 characters.
    pub fn pseudonym(&mut self) -> Pseudonym {
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        Pseudonym::parse(URL_SAFE_NO_PAD.encode(bytes)).expect("22-char url-safe token")
    }

    /// Fresh pseudonym that contains none of `forbidden` as a substring.
    pub fn pseudonym_avoiding<'a, I>(&mut self, forbidden: I) -> Pseudonym
    where
        I: IntoIterator<Item = &'a str> + Clone,
    {
        loop {
            let candidate = self.pseudonym();
            let clash = forbidden
                .clone()
                .into_iter()
                .any(|s| !s.is_empty() && candidate.as_str().contains(s));
            if !clash {
                return candidate;
            }
        }
    }

    fn token(&mut self, prefix: &str) -> String {
        let mut bytes = [0u8; 8];
        self.rng.fill_bytes(&mut bytes);
        format!("{prefix}_{}", hex::encode(bytes))
    }

    pub fn request_id(&mut self) -> RequestId {
        RequestId::new(self.token("req"))
    }

    pub fn consent_id(&mut self) -> ConsentId {
        ConsentId::new(self.token("con"))
    }

    pub fn restriction_id(&mut self) -> RestrictionId {
        RestrictionId::new(self.token("res"))
    }

    pub fn command_id(&mut self) -> CommandId {
        CommandId::new(self.token("cmd"))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudonyms_are_22_url_safe_chars() {
        let mut ids = IdGenerator::seeded(7);
        for _ in 0..100 {
            let p = ids.pseudonym();
            assert_eq!(p.as_str().len(), 22);
        }
    }

    #[test]
    fn same_seed_same_tokens() {
        let mut a = IdGenerator::seeded(1);
        let mut b = IdGenerator::seeded(1);
        assert_eq!(a.pseudonym(), b.pseudonym());
        assert_eq!(a.request_id(), b.request_id());
    }

    #[test]
    fn avoiding_skips_forbidden_substrings() {
        // a one-letter forbidden set forces rejection of most candidates
        let mut ids = IdGenerator::seeded(3);
        let p = ids.pseudonym_avoiding(["A", "b", "Q"]);
        assert!(!p.as_str().contains('A'));
        assert!(!p.as_str().contains('b'));
        assert!(!p.as_str().contains('Q'));
    }
}
