use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatTurn, ClientError, ModelClient, Unavailable};

/// Canonical text form of a conversation; the basis of request fingerprints.
pub fn render_turns(turns: &[ChatTurn]) -> String {
    let mut out = String::new();
    for t in turns {
        out.push_str("<|");
        out.push_str(t.role.as_str());
        out.push_str("|>\n");
        if let Some(img) = &t.image {
            out.push_str("[image: ");
            out.push_str(img);
            out.push_str("]\n");
        }
        out.push_str(&t.content);
        out.push('\n');
    }
    out
}

/// Hex SHA-256 of [`render_turns`].
pub fn fingerprint(turns: &[ChatTurn]) -> String {
    let digest = Sha256::digest(render_turns(turns).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substring of the rendered conversation that selects this rule.
    pub contains: String,
    pub reply: String,
}

/// Canned-response backend.
///
/// Lookup order: exact fingerprint, then the first rule whose `contains`
/// substring occurs in the rendered conversation, then the fallback (only in
/// non-strict mode). Strict mode reports unscripted requests as
/// [`Unavailable::Unscripted`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedBackend {
    #[serde(default)]
    pub exact: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub fallback: Option<String>,
    #[serde(default = "default_strict")]
    pub strict: bool,
}

fn default_strict() -> bool {
    true
}

impl ScriptedBackend {
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::default()
        }
    }

    /// Non-strict backend answering `fallback` to anything unscripted.
    pub fn lenient(fallback: impl Into<String>) -> Self {
        Self {
            strict: false,
            fallback: Some(fallback.into()),
            ..Self::default()
        }
    }

    pub fn on_turns(mut self, turns: &[ChatTurn], reply: impl Into<String>) -> Self {
        self.exact.insert(fingerprint(turns), reply.into());
        self
    }

    pub fn on_contains(mut self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            contains: needle.into(),
            reply: reply.into(),
        });
        self
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::InvalidRequest(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ClientError::InvalidRequest(format!("{}: {e}", path.display())))
    }

    pub fn lookup(&self, turns: &[ChatTurn]) -> Result<String, ClientError> {
        let fp = fingerprint(turns);
        if let Some(reply) = self.exact.get(&fp) {
            return Ok(reply.clone());
        }
        if !self.rules.is_empty() {
            let rendered = render_turns(turns);
            if let Some(rule) = self.rules.iter().find(|r| rendered.contains(&r.contains)) {
                return Ok(rule.reply.clone());
            }
        }
        match (&self.fallback, self.strict) {
            (Some(f), false) => Ok(f.clone()),
            (None, false) => Ok(String::new()),
            (_, true) => Err(ClientError::BackendUnavailable(Unavailable::Unscripted {
                fingerprint: fp,
            })),
        }
    }
}

impl ModelClient for ScriptedBackend {
    fn respond(&self, turns: &[ChatTurn], _stop: &[String]) -> Result<String, ClientError> {
        self.lookup(turns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turns(u: &str) -> Vec<ChatTurn> {
        vec![ChatTurn::system("sys"), ChatTurn::user(u)]
    }

    #[test]
    fn fingerprint_hit() {
        let b = ScriptedBackend::strict().on_turns(&turns("hello"), "canned");
        assert_eq!(b.lookup(&turns("hello")).unwrap(), "canned");
    }

    #[test]
    fn strict_unscripted_is_unavailable() {
        let b = ScriptedBackend::strict();
        match b.lookup(&turns("x")).unwrap_err() {
            ClientError::BackendUnavailable(Unavailable::Unscripted { fingerprint }) => {
                assert_eq!(fingerprint.len(), 64)
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn lenient_fallback_and_rules() {
        let b = ScriptedBackend::lenient("No")
            .on_contains("search-free", "Yes")
            .on_contains("search", "Maybe");
        assert_eq!(b.lookup(&turns("is it search-free?")).unwrap(), "Yes");
        assert_eq!(b.lookup(&turns("search please")).unwrap(), "Maybe");
        assert_eq!(b.lookup(&turns("other")).unwrap(), "No");
    }

    #[test]
    fn fingerprints_are_stable_and_sensitive() {
        let a = fingerprint(&turns("x"));
        assert_eq!(a, fingerprint(&turns("x")));
        assert_ne!(a, fingerprint(&turns("y")));
        let with_img = vec![
            ChatTurn::system("sys"),
            ChatTurn::user("x").with_image(Some("a.png".into())),
        ];
        assert_ne!(a, fingerprint(&with_img));
    }

    #[test]
    fn deserializes_script_files() {
        let b: ScriptedBackend = serde_json::from_str(
            r#"{"rules":[{"contains":"capital","reply":"Paris"}],"fallback":"?","strict":false}"#,
        )
        .unwrap();
        assert_eq!(b.lookup(&turns("capital of France")).unwrap(), "Paris");
        let strict: ScriptedBackend = serde_json::from_str("{}").unwrap();
        assert!(strict.strict);
    }
}
