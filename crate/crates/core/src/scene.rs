//! Synthetic manipulation episodes.
//!
//! A scene is a `grid_side × grid_side` patch grid holding a few two-patch
//! objects of distinct types. The instruction names a verb, the target
//! object type and a destination cell at fixed positions 0..2, followed by
//! distractor tokens. The ground-truth chunk moves from the proprioceptive
//! pose to the target's centroid.

use std::path::Path;

use crate::error::{config_err, Error, FormatError, Result};
use crate::numerics::{derive_seed, Rng, Tensor};
use crate::svt::{self, Record};

pub const ACTION_DIM: usize = 7;
pub const NUM_VERBS: usize = 4;
pub const NUM_DESTINATIONS: usize = 16;
/// Patches covered by one object.
pub const OBJECT_CELLS: usize = 2;

/// Terminal end-effector rotation for each verb.
pub const VERB_ROTATIONS: [[f64; 3]; NUM_VERBS] =
    [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5], [-0.5, -0.5, 0.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub grid_side: usize,
    pub num_objects: usize,
    /// Object type codes run 1..=num_types; 0 is background.
    pub num_types: usize,
    pub vocab_size: usize,
    pub instr_len: usize,
    pub chunk_len: usize,
    pub noise_std: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid_side: 8,
            num_objects: 3,
            num_types: 6,
            vocab_size: 64,
            instr_len: 8,
            chunk_len: 8,
            noise_std: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn object_token(&self, object_type: u32) -> u32 {
        (NUM_VERBS as u32 - 1) + object_type
    }

    pub fn destination_token(&self, cell: usize) -> u32 {
        (NUM_VERBS + self.num_types + cell) as u32
    }

    pub fn first_distractor(&self) -> usize {
        NUM_VERBS + self.num_types + NUM_DESTINATIONS
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_patches();
        if self.grid_side < 2 {
            return Err(config_err!("grid_side must be >= 2, got {}", self.grid_side));
        }
        if self.num_objects < 1 || self.num_objects > n / 4 {
            return Err(config_err!(
                "num_objects must be in 1..={} for {} patches, got {}",
                n / 4,
                n,
                self.num_objects
            ));
        }
        if self.num_objects > self.num_types {
            return Err(config_err!(
                "num_objects {} exceeds num_types {} (types are distinct per scene)",
                self.num_objects,
                self.num_types
            ));
        }
        if self.instr_len < 3 {
            return Err(config_err!("instr_len must be >= 3, got {}", self.instr_len));
        }
        if self.chunk_len < 2 {
            return Err(config_err!("chunk_len must be >= 2, got {}", self.chunk_len));
        }
        if self.vocab_size <= self.first_distractor() {
            return Err(config_err!(
                "vocab_size must exceed {} to leave distractor tokens, got {}",
                self.first_distractor(),
                self.vocab_size
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config_err!("noise_std must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub patch_types: Vec<u32>,
    pub instruction: Vec<u32>,
    pub proprio: [f64; ACTION_DIM],
    pub target_mask: Vec<bool>,
    /// `K×7`: translation[3], rotation[3], gripper.
    pub action_chunk: Tensor,
    pub seed: u64,
}

impl Episode {
    pub fn grid_side(&self) -> usize {
        (self.patch_types.len() as f64).sqrt().round() as usize
    }

    pub fn verb(&self) -> usize {
        self.instruction[0] as usize
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.target_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| t.then_some(i))
            .collect()
    }

    pub fn chunk_len(&self) -> usize {
        self.action_chunk.rows()
    }
}

/// Normalised `(x, y)` of a patch centre in `[-1, 1]`.
pub fn patch_coords(index: usize, grid_side: usize) -> (f64, f64) {
    let (row, col) = (index / grid_side, index % grid_side);
    let norm = |v: usize| (v as f64 + 0.5) / grid_side as f64 * 2.0 - 1.0;
    (norm(col), norm(row))
}

/// Ground-truth chunk: linear translation from the proprioceptive position
/// to the target centroid, cosine-ramped rotation towards the verb's
/// terminal rotation, gripper closing from step `ceil(K/2)`.
pub fn oracle_action_chunk(
    grid_side: usize,
    chunk_len: usize,
    proprio: &[f64; ACTION_DIM],
    target_mask: &[bool],
    verb: usize,
) -> Result<Tensor> {
    let targets: Vec<usize> = (0..target_mask.len()).filter(|&i| target_mask[i]).collect();
    if targets.is_empty() {
        return Err(Error::Input("target mask is empty".into()));
    }
    if verb >= NUM_VERBS {
        return Err(Error::Input(format!("verb {verb} out of range")));
    }
    if chunk_len < 2 {
        return Err(config_err!("chunk_len must be >= 2"));
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for &i in &targets {
        let (x, y) = patch_coords(i, grid_side);
        cx += x;
        cy += y;
    }
    let end = [cx / targets.len() as f64, cy / targets.len() as f64, 0.0];
    let rot_end = VERB_ROTATIONS[verb];
    let close_from = chunk_len.div_ceil(2);
    let mut chunk = Tensor::zeros(&[chunk_len, ACTION_DIM]);
    for i in 0..chunk_len {
        let s = i as f64 / (chunk_len - 1) as f64;
        let ramp = (1.0 - (std::f64::consts::PI * s).cos()) / 2.0;
        for d in 0..3 {
            chunk.set(i, d, proprio[d] + (end[d] - proprio[d]) * s);
            chunk.set(i, 3 + d, proprio[3 + d] + (rot_end[d] - proprio[3 + d]) * ramp);
        }
        chunk.set(i, 6, if i < close_from { 0.0 } else { 1.0 });
    }
    // endpoints exact regardless of rounding in the interpolation
    for d in 0..3 {
        chunk.set(0, d, proprio[d]);
        chunk.set(chunk_len - 1, d, end[d]);
    }
    Ok(chunk)
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

pub fn generate_episode(seed: u64, spec: &SceneSpec) -> Result<Episode> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let side = spec.grid_side;
    let n = spec.num_patches();

    let mut types: Vec<u32> = (1..=spec.num_types as u32).collect();
    rng.shuffle(&mut types);
    types.truncate(spec.num_objects);

    let mut patch_types = vec![0u32; n];
    let mut objects: Vec<Vec<usize>> = Vec::with_capacity(spec.num_objects);
    for &t in &types {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let horizontal = rng.below(2) == 0;
            let (rows, cols) = if horizontal { (side, side - 1) } else { (side - 1, side) };
            let (r, c) = (rng.below(rows), rng.below(cols));
            let a = r * side + c;
            let b = if horizontal { a + 1 } else { a + side };
            if patch_types[a] == 0 && patch_types[b] == 0 {
                placed = Some(vec![a, b]);
                break;
            }
        }
        let cells = placed.ok_or_else(|| config_err!("object placement impossible for {spec:?}"))?;
        for &c in &cells {
            patch_types[c] = t;
        }
        objects.push(cells);
    }

    let target = rng.below(types.len());
    let target_type = types[target];
    let mut target_mask = vec![false; n];
    for &c in &objects[target] {
        target_mask[c] = true;
    }

    let verb = rng.below(NUM_VERBS);
    let mut instruction = Vec::with_capacity(spec.instr_len);
    instruction.push(verb as u32);
    instruction.push(spec.object_token(target_type));
    instruction.push(spec.destination_token(rng.below(NUM_DESTINATIONS)));
    let first = spec.first_distractor();
    while instruction.len() < spec.instr_len {
        instruction.push((first + rng.below(spec.vocab_size - first)) as u32);
    }

    let mut proprio = [0.0; ACTION_DIM];
    for v in proprio.iter_mut().take(3) {
        *v = rng.next_f64() * 2.0 - 1.0;
    }
    for v in proprio.iter_mut().skip(3).take(3) {
        *v = rng.next_f64() - 0.5;
    }

    let action_chunk = oracle_action_chunk(side, spec.chunk_len, &proprio, &target_mask, verb)?;
    Ok(Episode {
        patch_types,
        instruction,
        proprio,
        target_mask,
        action_chunk,
        seed,
    })
}

/// `count` episodes with per-episode seeds derived from `seed`.
pub fn generate_episodes(seed: u64, count: usize, spec: &SceneSpec) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| generate_episode(derive_seed(seed, i as u64), spec))
        .collect()
}

/// Number of episodes targeting each type code (index 0 unused).
pub fn target_histogram(episodes: &[Episode], spec: &SceneSpec) -> Vec<usize> {
    let mut hist = vec![0; spec.num_types + 1];
    for ep in episodes {
        if let Some(i) = ep.target_indices().first() {
            hist[ep.patch_types[*i] as usize] += 1;
        }
    }
    hist
}

const FIELDS: [&str; 6] = [
    "patch_types",
    "instruction",
    "proprio",
    "target_mask",
    "action_chunk",
    "seed",
];

pub fn episode_records(index: usize, ep: &Episode) -> Vec<Record> {
    let p = |f: &str| format!("ep{index}/{f}");
    vec![
        Record::u32(p("patch_types"), vec![ep.patch_types.len()], ep.patch_types.clone()),
        Record::u32(p("instruction"), vec![ep.instruction.len()], ep.instruction.clone()),
        Record::f64(
            p("proprio"),
            &Tensor::new(vec![ACTION_DIM], ep.proprio.to_vec()).expect("7"),
        ),
        Record::u8(
            p("target_mask"),
            vec![ep.target_mask.len()],
            ep.target_mask.iter().map(|&b| b as u8).collect(),
        ),
        Record::f64(p("action_chunk"), &ep.action_chunk),
        Record::u32(p("seed"), vec![2], vec![ep.seed as u32, (ep.seed >> 32) as u32]),
    ]
}

pub fn encode_dataset(episodes: &[Episode]) -> Vec<u8> {
    let records: Vec<Record> = episodes
        .iter()
        .enumerate()
        .flat_map(|(i, ep)| episode_records(i, ep))
        .collect();
    svt::encode(&records)
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Vec<Episode>, FormatError> {
    let records = svt::decode(bytes)?;
    if records.len() % FIELDS.len() != 0 {
        return Err(FormatError::Malformed(format!(
            "{} records is not a whole number of episodes",
            records.len()
        )));
    }
    let bad = |m: String| FormatError::Malformed(m);
    let mut episodes = Vec::with_capacity(records.len() / FIELDS.len());
    for (i, group) in records.chunks(FIELDS.len()).enumerate() {
        for (rec, field) in group.iter().zip(FIELDS) {
            if rec.name != format!("ep{i}/{field}") {
                return Err(bad(format!("expected ep{i}/{field}, found {}", rec.name)));
            }
        }
        let patch_types = group[0].as_u32()?.to_vec();
        let instruction = group[1].as_u32()?.to_vec();
        let proprio_t = group[2].as_tensor()?;
        let proprio: [f64; ACTION_DIM] = proprio_t
            .data()
            .try_into()
            .map_err(|_| bad(format!("ep{i}/proprio must hold 7 values")))?;
        let mask = group[3].as_u8()?;
        if mask.len() != patch_types.len() || mask.iter().any(|&b| b > 1) {
            return Err(bad(format!("ep{i}/target_mask inconsistent")));
        }
        let action_chunk = group[4].as_tensor()?;
        if action_chunk.rank() != 2 || action_chunk.cols() != ACTION_DIM {
            return Err(bad(format!("ep{i}/action_chunk must be K×7")));
        }
        let seed_words = group[5].as_u32()?;
        if seed_words.len() != 2 {
            return Err(bad(format!("ep{i}/seed must hold two words")));
        }
        let side = (patch_types.len() as f64).sqrt().round() as usize;
        if side * side != patch_types.len() {
            return Err(bad(format!("ep{i}: patch count {} is not square", patch_types.len())));
        }
        episodes.push(Episode {
            patch_types,
            instruction,
            proprio,
            target_mask: mask.iter().map(|&b| b == 1).collect(),
            action_chunk,
            seed: seed_words[0] as u64 | (seed_words[1] as u64) << 32,
        });
    }
    Ok(episodes)
}

pub fn write_dataset(path: &Path, episodes: &[Episode]) -> Result<()> {
    std::fs::write(path, encode_dataset(episodes)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_dataset(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SceneSpec::default();
        let a = generate_episode(99, &spec).unwrap();
        let b = generate_episode(99, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(encode_dataset(&[a]), encode_dataset(&[b]));
    }

    #[test]
    fn episode_invariants() {
        let spec = SceneSpec::default();
        for ep in generate_episodes(5, 200, &spec).unwrap() {
            assert_eq!(ep.action_chunk.shape(), &[8, 7]);
            assert_eq!(ep.target_indices().len(), OBJECT_CELLS);
            let target_type = ep.patch_types[ep.target_indices()[0]];
            assert_eq!(ep.instruction[1], spec.object_token(target_type));
            assert!(ep.patch_types.contains(&target_type));
            for i in 0..8 {
                for d in 0..6 {
                    assert!(ep.action_chunk.get(i, d).abs() <= 1.0);
                }
                let g = ep.action_chunk.get(i, 6);
                assert!(g == 0.0 || g == 1.0);
            }
            for d in 0..3 {
                assert_eq!(ep.action_chunk.get(0, d), ep.proprio[d]);
            }
            assert!(ep.instruction.iter().all(|&t| (t as usize) < spec.vocab_size));
            let objects = ep.patch_types.iter().filter(|&&t| t != 0).count();
            assert_eq!(objects, spec.num_objects * OBJECT_CELLS);
        }
    }

    #[test]
    fn final_step_is_centroid() {
        let spec = SceneSpec::default();
        let ep = generate_episode(3, &spec).unwrap();
        let t = ep.target_indices();
        let (x0, y0) = patch_coords(t[0], 8);
        let (x1, y1) = patch_coords(t[1], 8);
        assert_eq!(ep.action_chunk.get(7, 0), (x0 + x1) / 2.0);
        assert_eq!(ep.action_chunk.get(7, 1), (y0 + y1) / 2.0);
        assert_eq!(ep.action_chunk.get(7, 2), 0.0);
    }

    #[test]
    fn two_step_chunk_is_endpoints() {
        let q = [0.2, -0.4, 0.6, 0.1, 0.0, -0.2, 0.0];
        let mut mask = vec![false; 4];
        mask[3] = true;
        let c = oracle_action_chunk(2, 2, &q, &mask, 1).unwrap();
        assert_eq!(&c.row(0)[..6], &q[..6]);
        assert_eq!(c.get(0, 6), 0.0);
        assert_eq!(&c.row(1)[..3], &[0.5, 0.5, 0.0]);
        assert_eq!(&c.row(1)[3..6], &VERB_ROTATIONS[1]);
        assert_eq!(c.get(1, 6), 1.0);
    }

    #[test]
    fn gripper_threshold() {
        let q = [0.0; 7];
        let c = oracle_action_chunk(4, 8, &q, &[true; 16], 0).unwrap();
        let g: Vec<f64> = (0..8).map(|i| c.get(i, 6)).collect();
        assert_eq!(g, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn midpoint_between_endpoints() {
        // odd K has an exact middle step; even K=8 is checked via the
        // symmetric pair (3, 4) averaging to the endpoint midpoint.
        let q = [0.3, -0.9, 0.7, 0.0, 0.0, 0.0, 0.0];
        let mut mask = vec![false; 64];
        mask[10] = true;
        let c = oracle_action_chunk(8, 8, &q, &mask, 2).unwrap();
        for d in 0..3 {
            let mid = (c.get(0, d) + c.get(7, d)) / 2.0;
            assert!(((c.get(3, d) + c.get(4, d)) / 2.0 - mid).abs() <= 1e-12);
        }
        let c = oracle_action_chunk(8, 9, &q, &mask, 2).unwrap();
        for d in 0..3 {
            assert!((c.get(4, d) - (c.get(0, d) + c.get(8, d)) / 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(oracle_action_chunk(2, 4, &[0.0; 7], &[false; 4], 0).is_err());
    }

    #[test]
    fn every_type_is_targeted() {
        let spec = SceneSpec::default();
        let eps = generate_episodes(1, 1000, &spec).unwrap();
        let hist = target_histogram(&eps, &spec);
        assert!(hist[1..].iter().all(|&c| c > 0), "{hist:?}");
    }

    #[test]
    fn spec_validation() {
        let bad = [
            SceneSpec {
                grid_side: 1,
                ..Default::default()
            },
            SceneSpec {
                num_objects: 0,
                ..Default::default()
            },
            SceneSpec {
                num_objects: 17,
                ..Default::default()
            },
            SceneSpec {
                instr_len: 2,
                ..Default::default()
            },
            SceneSpec {
                vocab_size: 20,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(generate_episode(0, &s).is_err(), "{s:?}");
        }
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let spec = SceneSpec::default();
        let eps = generate_episodes(7, 100, &spec).unwrap();
        let bytes = encode_dataset(&eps);
        assert_eq!(decode_dataset(&bytes).unwrap(), eps);
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 10]),
            Err(FormatError::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert_eq!(decode_dataset(&bad).unwrap_err(), FormatError::BadMagic);
        assert!(decode_dataset(&encode_dataset(&[])).unwrap().is_empty());
    }
}
