//! Labeled pair generation, splitting and the binary pair-file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{io_err, SiameseError};
use crate::facemodel::{permute_augment, random_permutations, FaceModel, FlatWeights};

pub const PAIRS_MAGIC: [u8; 4] = *b"NPAR";
const PAIRS_VERSION: u16 = 1;
// bounds the search for a negative pair when identities share vectors
const NEGATIVE_ATTEMPTS: usize = 1000;

/// Two flattened models and whether they belong to the same identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub a: FlatWeights,
    pub b: FlatWeights,
    pub same: bool,
}

/// An identity label with the models fitted to its clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub label: String,
    pub models: Vec<FlatWeights>,
}

/// Counts and seed for [`generate_pairs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSpec {
    pub positives: usize,
    pub negatives: usize,
    /// Non-identity row reorderings added per stored model.
    pub augment_per_model: usize,
    pub seed: u64,
}

/// Every model of an identity plus its augmentations, without bitwise
/// duplicates.
fn variant_pool(identity: &Identity, augment: usize, seed: u64) -> Result<Vec<FlatWeights>, SiameseError> {
    let mut pool: Vec<FlatWeights> = Vec::new();
    let push = |w: FlatWeights, pool: &mut Vec<FlatWeights>| {
        if !pool.iter().any(|p| p.bit_eq(&w)) {
            pool.push(w);
        }
    };
    for (k, flat) in identity.models.iter().enumerate() {
        push(flat.clone(), &mut pool);
        if augment == 0 {
            continue;
        }
        let model = FaceModel::unflatten(flat)?;
        let perms = random_permutations(
            model.hidden_count(),
            augment,
            seed.wrapping_add(k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            true,
        )?;
        for p in &perms {
            push(permute_augment(&model, p)?.flatten(), &mut pool);
        }
    }
    Ok(pool)
}

/// Samples exactly `positives` same-identity and `negatives`
/// different-identity pairs, with replacement, in seeded random order.
///
/// Positive pairs draw two distinct vectors from one identity's pool of
/// models and their augmentations. No pair joins two bit-identical vectors.
pub fn generate_pairs(gallery: &[Identity], spec: &PairSpec) -> Result<Vec<LabeledPair>, SiameseError> {
    let pools = gallery
        .iter()
        .enumerate()
        .map(|(i, id)| variant_pool(id, spec.augment_per_model, spec.seed ^ ((i as u64) << 32)))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dim) = pools.iter().flatten().map(|w| w.len()).next() {
        if let Some(bad) = pools.iter().flatten().find(|w| w.len() != dim) {
            return Err(SiameseError::DimensionMismatch { expected: dim, found: bad.len() });
        }
    }
    let rich: Vec<usize> = (0..pools.len()).filter(|&i| pools[i].len() >= 2).collect();
    if spec.positives > 0 && rich.is_empty() {
        return Err(SiameseError::InfeasiblePairs(
            "positive pairs need an identity with two distinct models or augmentations".into(),
        ));
    }
    let nonempty: Vec<usize> = (0..pools.len()).filter(|&i| !pools[i].is_empty()).collect();
    if spec.negatives > 0 && nonempty.len() < 2 {
        return Err(SiameseError::InfeasiblePairs("negative pairs need at least two identities with models".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.positives + spec.negatives);
    for _ in 0..spec.positives {
        let pool = &pools[*rich.choose(&mut rng).unwrap()];
        let i = rng.gen_range(0..pool.len());
        let mut j = rng.gen_range(0..pool.len() - 1);
        if j >= i {
            j += 1;
        }
        out.push(LabeledPair { a: pool[i].clone(), b: pool[j].clone(), same: true });
    }
    for _ in 0..spec.negatives {
        let pair = (0..NEGATIVE_ATTEMPTS).find_map(|_| {
            let picked: Vec<&usize> = nonempty.choose_multiple(&mut rng, 2).collect();
            let a = pools[*picked[0]].choose(&mut rng).unwrap();
            let b = pools[*picked[1]].choose(&mut rng).unwrap();
            (!a.bit_eq(b)).then(|| LabeledPair { a: a.clone(), b: b.clone(), same: false })
        });
        out.push(pair.ok_or_else(|| SiameseError::InfeasiblePairs("identities share identical models".into()))?);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Seeded split into `(first, rest)`, `first` holding `round(fraction·n)`
/// pairs.
pub fn split_pairs(
    pairs: &[LabeledPair],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledPair>, Vec<LabeledPair>), SiameseError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SiameseError::InvalidConfig(format!("split fraction {fraction} is outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * pairs.len() as f64).round() as usize;
    let take = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect();
    Ok((take(&order[..cut]), take(&order[cut..])))
}

pub fn write_pairs(mut w: impl Write, pairs: &[LabeledPair]) -> std::io::Result<()> {
    let dim = pairs.first().map_or(0, |p| p.a.len());
    w.write_all(&PAIRS_MAGIC)?;
    w.write_all(&PAIRS_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&[0u8; 6])?;
    w.write_all(&(pairs.len() as u64).to_le_bytes())?;
    for p in pairs {
        assert!(p.a.len() == dim && p.b.len() == dim, "pair dimensions differ");
        w.write_all(&[u8::from(p.same)])?;
        for v in p.a.values.iter().chain(&p.b.values) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_pairs(mut r: impl Read) -> Result<Vec<LabeledPair>, SiameseError> {
    let bad = |reason: String| SiameseError::Format { kind: "pair", reason };
    let short = |e: std::io::Error| bad(format!("truncated: {e}"));
    let mut header = [0u8; 24];
    r.read_exact(&mut header).map_err(short)?;
    if header[0..4] != PAIRS_MAGIC {
        return Err(bad(format!("bad magic {:?}", &header[0..4])));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != PAIRS_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let mut record = vec![0u8; 1 + 16 * dim];
    let mut out = Vec::new();
    for _ in 0..count {
        r.read_exact(&mut record).map_err(short)?;
        let same = match record[0] {
            0 => false,
            1 => true,
            l => return Err(bad(format!("label byte {l}"))),
        };
        let values: Vec<f64> = record[1..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (a, b) = values.split_at(dim);
        out.push(LabeledPair { a: FlatWeights::new(a.to_vec())?, b: FlatWeights::new(b.to_vec())?, same });
    }
    if r.read(&mut [0u8; 1]).map_err(short)? != 0 {
        return Err(bad("trailing bytes after the last record".into()));
    }
    Ok(out)
}

pub fn save_pairs(path: &Path, pairs: &[LabeledPair]) -> Result<(), SiameseError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_pairs(BufWriter::new(file), pairs).map_err(io_err(path))
}

pub fn load_pairs(path: &Path) -> Result<Vec<LabeledPair>, SiameseError> {
    read_pairs(BufReader::new(File::open(path).map_err(io_err(path))?))
}
