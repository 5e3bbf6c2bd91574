use alloc::collections::BTreeSet;
use alloc::string::String;

/// Jaccard similarity of whitespace token sets. Two empty texts count as
/// identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<&str> = a.split_whitespace().collect();
    let sb: BTreeSet<&str> = b.split_whitespace().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Picks the sample with the highest total similarity to the other samples.
/// Ties go to the shorter body, then to the lexicographically smaller one.
pub fn self_consistency(samples: &[String]) -> Option<&String> {
    let totals = samples.iter().enumerate().map(|(i, s)| {
        let total: f64 = samples
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, t)| jaccard(s, t))
            .sum();
        (total, s)
    });
    totals
        .reduce(|best, next| {
            let better = next.0 > best.0
                || (next.0 == best.0
                    && (next.1.len() < best.1.len()
                        || (next.1.len() == best.1.len() && next.1 < best.1)));
            if better {
                next
            } else {
                best
            }
        })
        .map(|(_, s)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn owned(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| String::from(*s)).collect()
    }

    #[test]
    fn jaccard_values() {
        assert_eq!(jaccard("a b c", "a b c"), 1.0);
        assert_eq!(jaccard("a b", "c d"), 0.0);
        assert!((jaccard("a b c", "b c d") - 0.5).abs() < 1e-15);
        assert_eq!(jaccard("", ""), 1.0);
    }

    #[test]
    fn picks_the_consensus_sample() {
        let s = owned(&["tag people and places", "tag people places", "write a poem"]);
        assert_eq!(self_consistency(&s).unwrap(), "tag people places");
    }

    #[test]
    fn ties_break_by_length_then_text() {
        let s = owned(&["bb", "aa"]);
        assert_eq!(self_consistency(&s).unwrap(), "aa");
        let s = owned(&["nine char", "five."]);
        assert_eq!(self_consistency(&s).unwrap(), "five.");
        let s = owned(&["abc", "abc", "xyz"]);
        assert_eq!(self_consistency(&s).unwrap(), "abc");
        let s = owned(&["only"]);
        assert_eq!(self_consistency(&s).unwrap(), "only");
        assert!(self_consistency(&[]).is_none());
    }
}
