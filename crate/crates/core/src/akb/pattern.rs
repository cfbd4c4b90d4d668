//! URL patterns: `*` matches any run of characters (including `/`), `?`
//! matches exactly one character, everything else is literal. A pattern must
//! match the whole URL.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad url pattern {pattern:?}: {reason}")]
pub struct BadPattern {
    pub pattern: String,
    pub reason: &'static str,
}

/// A validated URL pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UrlPattern {
    text: String,
}

impl UrlPattern {
    pub fn parse(pattern: &str) -> Result<Self, BadPattern> {
        let bad = |reason| BadPattern { pattern: pattern.to_string(), reason };
        if pattern.is_empty() {
            return Err(bad("empty pattern"));
        }
        if pattern.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(bad("whitespace or control character"));
        }
        Ok(UrlPattern { text: pattern.to_string() })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn matches(&self, url: &str) -> bool {
        glob_match(&self.text, url)
    }

    /// Number of literal characters; longer literal patterns are more specific.
    pub fn specificity(&self) -> usize {
        self.text.chars().filter(|c| *c != '*' && *c != '?').count()
    }
}

pub fn match_url(pattern: &str, url: &str) -> bool {
    glob_match(pattern, url)
}

/// Iterative glob match with single-star backtracking; linear in practice.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || (p[pi] != '*' && p[pi] == t[ti])) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}
