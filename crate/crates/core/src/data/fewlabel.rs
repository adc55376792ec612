use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

const MAX_REDRAWS: u64 = 256;

/// `(class, part)` pairs present in `clouds`.
pub fn part_keys<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> BTreeSet<(usize, usize)> {
    clouds
        .into_iter()
        .flat_map(|c| {
            c.part_labels
                .iter()
                .flatten()
                .flatten()
                .map(move |&p| (c.label, p))
        })
        .collect()
}

/// Indices of a class-balanced labelled subset holding `fraction` of each
/// class (at least one sample per class).
///
/// The subset must contain every `(class, part)` pair present in the whole
/// set; a draw that misses one is discarded and redrawn with the next seed.
/// Returned indices are sorted.
pub fn select_few_labels(clouds: &[PointCloud], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in clouds.iter().enumerate() {
        by_class.entry(c.label).or_default().push(i);
    }
    let wanted = part_keys(clouds);
    for attempt in 0..MAX_REDRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut chosen = Vec::new();
        for members in by_class.values() {
            let take = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
            let mut m = members.clone();
            m.shuffle(&mut rng);
            chosen.extend_from_slice(&m[..take]);
        }
        chosen.sort_unstable();
        if part_keys(chosen.iter().map(|&i| &clouds[i])) == wanted {
            return Ok(chosen);
        }
    }
    Err(Error::Input(format!(
        "no {fraction} subset covering every part label within {MAX_REDRAWS} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::{synthesize, Split, SyntheticSpec};

    #[test]
    fn one_percent_keeps_every_part() {
        let spec = SyntheticSpec::new(64, 40, 0, 1);
        let clouds = synthesize(&spec, Split::Train).unwrap();
        let picked = select_few_labels(&clouds, 0.01, 9).unwrap();
        assert_eq!(picked.len(), 5);
        assert_eq!(part_keys(picked.iter().map(|&i| &clouds[i])), part_keys(&clouds));
        assert_eq!(picked, select_few_labels(&clouds, 0.01, 9).unwrap());
    }

    #[test]
    fn fraction_bounds() {
        assert!(select_few_labels(&[], 0.0, 0).is_err());
        assert!(select_few_labels(&[], 1.5, 0).is_err());
    }
}
