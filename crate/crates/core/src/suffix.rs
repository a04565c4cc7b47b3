//! Public suffix rule matching over the standard `public_suffix_list.dat`
//! line format (normal, `*.` wildcard and `!` exception rules).

use std::collections::HashSet;
use std::sync::OnceLock;

const BUNDLED_LIST: &str = include_str!("../data/public_suffix_list.dat");

#[derive(Debug, Default, Clone)]
pub struct SuffixRules {
    exact: HashSet<String>,
    /// Parents of wildcard rules: `*.ck` is stored as `ck`.
    wildcard: HashSet<String>,
    exceptions: HashSet<String>,
}

impl SuffixRules {
    /// Parses a rule list. Comments, blank lines and anything after the first
    /// whitespace on a line are ignored. Unicode rules are converted to
    /// punycode so they match names as they appear on the wire.
    pub fn parse(text: &str) -> Self {
        let mut rules = SuffixRules::default();
        for line in text.lines() {
            let Some(rule) = line.split_whitespace().next() else {
                continue;
            };
            if rule.starts_with("//") {
                continue;
            }
            let (target, body) = if let Some(rest) = rule.strip_prefix('!') {
                (&mut rules.exceptions, rest)
            } else if let Some(rest) = rule.strip_prefix("*.") {
                (&mut rules.wildcard, rest)
            } else {
                (&mut rules.exact, rule)
            };
            if let Some(ascii) = to_ascii(body) {
                target.insert(ascii);
            }
        }
        rules
    }

    /// The snapshot compiled into the binary, parsed once.
    pub fn bundled() -> &'static SuffixRules {
        static RULES: OnceLock<SuffixRules> = OnceLock::new();
        RULES.get_or_init(|| SuffixRules::parse(BUNDLED_LIST))
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.wildcard.len() + self.exceptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of trailing labels of `name` forming its public suffix, or
    /// `None` when no rule matches.
    pub fn suffix_label_count(&self, name: &str) -> Option<usize> {
        if name.is_empty() {
            return None;
        }
        let labels: Vec<&str> = name.split('.').collect();
        let n = labels.len();
        let mut best = None;
        for take in 1..=n {
            let candidate = labels[n - take..].join(".");
            if self.exceptions.contains(&candidate) {
                // Exception rules always prevail over any other match.
                return Some(take - 1);
            }
            let parent_wild = take >= 2 && self.wildcard.contains(&labels[n - take + 1..].join("."));
            if self.exact.contains(&candidate) || parent_wild {
                best = Some(take);
            }
        }
        best
    }
}

fn to_ascii(rule: &str) -> Option<String> {
    if rule.is_ascii() {
        return Some(rule.to_ascii_lowercase());
    }
    idna::domain_to_ascii(rule).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_list_loads() {
        let rules = SuffixRules::bundled();
        assert!(rules.len() > 5000);
        assert_eq!(rules.suffix_label_count("example.co.uk"), Some(2));
        assert_eq!(rules.suffix_label_count("www.ck"), Some(1));
        assert_eq!(rules.suffix_label_count("foo.ck"), Some(2));
        assert_eq!(rules.suffix_label_count("host.invalid-tld-zz"), None);
    }

    #[test]
    fn unicode_rules_become_punycode() {
        let rules = SuffixRules::parse("公司.cn\n*.ファッション\n");
        assert_eq!(rules.suffix_label_count("xn--55qx5d.cn"), Some(2));
        assert_eq!(rules.suffix_label_count("a.b.xn--bck1b9a5dre4c"), Some(2));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let rules = SuffixRules::parse("// comment\n\ncom\n  \nuk  trailing\n");
        assert_eq!(rules.len(), 2);
    }
}
