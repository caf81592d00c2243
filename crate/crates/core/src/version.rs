//! Protocol version policy.
//!
//! Versions are `major.minor` strings. Peers interoperate when the major
//! component matches; minor skew is tolerated in both directions so a newer
//! node can keep talking to an older one.

/// Version stamped on every outgoing message.
pub const PROTOCOL_VERSION: &str = "1.0";

/// Splits a `major.minor` version string. Returns `None` when the string has
/// a different shape (missing dot, empty parts, non-digits, extra segments).
pub fn parse_version(v: &str) -> Option<(u32, u32)> {
    let (major, minor) = v.split_once('.')?;
    if minor.contains('.') {
        return None;
    }
    Some((major.parse().ok()?, minor.parse().ok()?))
}

/// True when a peer speaking `v` can interoperate with this node.
pub fn is_compatible(v: &str) -> bool {
    let ours = parse_version(PROTOCOL_VERSION).expect("own version constant is well-formed");
    match parse_version(v) {
        Some((major, _)) => major == ours.0,
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_well_formed_versions() {
        assert_eq!(parse_version("1.0"), Some((1, 0)));
        assert_eq!(parse_version("1.7"), Some((1, 7)));
        assert_eq!(parse_version("12.34"), Some((12, 34)));
    }

    #[test]
    fn rejects_malformed_versions() {
        for v in ["", "1", "1.", ".0", "1.0.0", "v1.0", "1.x", "one.two"] {
            assert_eq!(parse_version(v), None, "{v:?} should not parse");
        }
    }

    #[test]
    fn minor_skew_is_tolerated_major_skew_is_not() {
        assert!(is_compatible("1.0"));
        assert!(is_compatible("1.9"));
        assert!(!is_compatible("2.0"));
        assert!(!is_compatible("0.9"));
        assert!(!is_compatible("garbage"));
    }
}
