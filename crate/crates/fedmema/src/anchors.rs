//! Multi-anchor class prototype bank.
//!
//! The server summarizes each foreground class as `n_k` anchors per pyramid
//! level: masked-average-pooled fused features, clustered per class so that
//! distinct appearance phenotypes get their own prototype. Cluster membership
//! is decided once — on the configured membership feature — and reused at
//! every level, so level-wise anchors describe the same sample subsets.
//!
//! Across rounds the bank is an exponential moving average: fresh anchors are
//! matched to bank slots within their class (greedy nearest pair at the
//! membership level) and blended with weight `omega` on the old value.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::tensor::Tensor;
use crate::wire::{put_f64, put_u16, put_u32, put_u8, Cursor};

pub const NUM_LEVELS: usize = 4;
const KMEANS_RESTARTS: usize = 8;
const KMEANS_ITERS: usize = 100;

/// Which feature decides cluster membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MembershipFeature {
    /// Descriptors from one level (1-based).
    Level(usize),
    /// Concatenation of all four levels, each group-mean-pooled to the
    /// level-1 channel count.
    ConcatAll,
}

/// Per-class, per-level descriptors pooled from one sample.
/// `per_class[c-1]` is `None` when class `c` is absent from the sample.
#[derive(Debug, Clone)]
pub struct SampleDescriptors {
    pub per_class: Vec<Option<[Vec<f64>; NUM_LEVELS]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLevel {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    /// Foreground class of each row (1-based label).
    pub class_of: Vec<u8>,
    pub filled: Vec<bool>,
}

impl AnchorLevel {
    fn empty(dim: usize, n_k: usize, num_fg: usize) -> AnchorLevel {
        let total = n_k * num_fg;
        AnchorLevel {
            dim,
            rows: vec![vec![0.0; dim]; total],
            class_of: (0..total).map(|r| (r / n_k + 1) as u8).collect(),
            filled: vec![false; total],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBank {
    pub n_k: usize,
    pub num_fg: usize,
    pub levels: [AnchorLevel; NUM_LEVELS],
}

impl AnchorBank {
    pub fn new(n_k: usize, num_fg: usize, dims: [usize; NUM_LEVELS]) -> AnchorBank {
        AnchorBank {
            n_k,
            num_fg,
            levels: [
                AnchorLevel::empty(dims[0], n_k, num_fg),
                AnchorLevel::empty(dims[1], n_k, num_fg),
                AnchorLevel::empty(dims[2], n_k, num_fg),
                AnchorLevel::empty(dims[3], n_k, num_fg),
            ],
        }
    }

    /// Row range belonging to class `c` (1-based).
    fn class_rows(&self, c: usize) -> std::ops::Range<usize> {
        (c - 1) * self.n_k..c * self.n_k
    }

    pub fn any_filled(&self) -> bool {
        self.levels[0].filled.iter().any(|&f| f)
    }

    /// Filled anchors of level `l` (1-based) as a `[K, C_l]` matrix plus the
    /// class label of each row. `None` if nothing is filled at that level.
    pub fn level_matrix(&self, l: usize) -> Option<(Tensor, Vec<u8>)> {
        let lv = &self.levels[l - 1];
        let idx: Vec<usize> = (0..lv.rows.len()).filter(|&r| lv.filled[r]).collect();
        if idx.is_empty() {
            return None;
        }
        let mut data = Vec::with_capacity(idx.len() * lv.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &r in &idx {
            data.extend_from_slice(&lv.rows[r]);
            labels.push(lv.class_of[r]);
        }
        Some((Tensor::from_vec(&[idx.len(), lv.dim], data).expect("anchor matrix shape"), labels))
    }

    /// Blend `fresh` into the bank: matched slots move by `1 - omega` toward
    /// the fresh anchor, unfilled slots copy on first sight. Returns the L2
    /// drift of slots that were already filled.
    pub fn ema_update(&mut self, fresh: &AnchorBank, omega: f64, membership: MembershipFeature) -> Result<f64> {
        if fresh.n_k != self.n_k || fresh.num_fg != self.num_fg {
            return Err(Error::data("anchor bank layout mismatch in EMA update"));
        }
        for l in 0..NUM_LEVELS {
            if fresh.levels[l].dim != self.levels[l].dim {
                return Err(Error::data("anchor dimension mismatch in EMA update"));
            }
        }
        // Distance level for matching: the membership level, or level 4 for
        // concatenated membership (the most semantic level).
        let match_level = match membership {
            MembershipFeature::Level(l) => l - 1,
            MembershipFeature::ConcatAll => NUM_LEVELS - 1,
        };
        let mut drift_sq = 0.0;
        for c in 1..=self.num_fg {
            let range = self.class_rows(c);
            let bank_filled: Vec<usize> = range.clone().filter(|&r| self.levels[match_level].filled[r]).collect();
            let fresh_filled: Vec<usize> = range.clone().filter(|&r| fresh.levels[match_level].filled[r]).collect();

            // Greedy nearest pairs (bank row, fresh row).
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for &b in &bank_filled {
                for &f in &fresh_filled {
                    let d: f64 = self.levels[match_level].rows[b]
                        .iter()
                        .zip(&fresh.levels[match_level].rows[f])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    pairs.push((d, b, f));
                }
            }
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut used_bank = vec![false; self.n_k * self.num_fg];
            let mut used_fresh = vec![false; self.n_k * self.num_fg];
            for (_, b, f) in pairs {
                if used_bank[b] || used_fresh[f] {
                    continue;
                }
                used_bank[b] = true;
                used_fresh[f] = true;
                for l in 0..NUM_LEVELS {
                    let old = self.levels[l].rows[b].clone();
                    // Delta form: a slot equal to its fresh anchor stays
                    // bit-identical (the update adds an exact zero).
                    for (i, slot) in self.levels[l].rows[b].iter_mut().enumerate() {
                        *slot += (1.0 - omega) * (fresh.levels[l].rows[f][i] - *slot);
                    }
                    drift_sq += old
                        .iter()
                        .zip(&self.levels[l].rows[b])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>();
                }
            }
            // First-fill: leftover fresh anchors occupy empty bank slots.
            let empty_slots: Vec<usize> = range.filter(|&r| !self.levels[match_level].filled[r]).collect();
            let leftover: Vec<usize> = fresh_filled.into_iter().filter(|&f| !used_fresh[f]).collect();
            for (&slot, &f) in empty_slots.iter().zip(&leftover) {
                for l in 0..NUM_LEVELS {
                    self.levels[l].rows[slot] = fresh.levels[l].rows[f].clone();
                    self.levels[l].filled[slot] = true;
                }
            }
        }
        Ok(drift_sq.sqrt())
    }

    /// Serialize the filled anchors for broadcast.
    ///
    /// Layout: `u8 n_k, u8 num_fg`, then per level `u8 level-id, u32 rows,
    /// u32 cols`, then per row `u16 class label` + `cols` f64 values.
    pub fn pack(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        put_u8(&mut buf, self.n_k as u8);
        put_u8(&mut buf, self.num_fg as u8);
        for l in 1..=NUM_LEVELS {
            let lv = &self.levels[l - 1];
            let idx: Vec<usize> = (0..lv.rows.len()).filter(|&r| lv.filled[r]).collect();
            put_u8(&mut buf, l as u8);
            put_u32(&mut buf, idx.len() as u32);
            put_u32(&mut buf, lv.dim as u32);
            for &r in &idx {
                put_u16(&mut buf, lv.class_of[r] as u16);
                for &v in &lv.rows[r] {
                    put_f64(&mut buf, v);
                }
            }
        }
        buf
    }

    pub fn unpack(bytes: &[u8]) -> Result<AnchorBank> {
        let mut c = Cursor::new(bytes);
        let n_k = c.u8()? as usize;
        let num_fg = c.u8()? as usize;
        if n_k == 0 || num_fg == 0 || n_k > 64 || num_fg > 16 {
            return Err(Error::format("implausible anchor pack header"));
        }
        let mut levels: Vec<AnchorLevel> = Vec::with_capacity(NUM_LEVELS);
        for l in 1..=NUM_LEVELS {
            let id = c.u8()? as usize;
            if id != l {
                return Err(Error::format(format!("anchor pack level id {id}, expected {l}")));
            }
            let rows = c.u32()? as usize;
            let dim = c.u32()? as usize;
            if rows > n_k * num_fg || dim == 0 || dim > 1 << 20 {
                return Err(Error::format("implausible anchor pack level header"));
            }
            let mut lv = AnchorLevel::empty(dim, n_k, num_fg);
            let mut next_slot = vec![0usize; num_fg];
            for _ in 0..rows {
                let label = c.u16()? as usize;
                if label == 0 || label > num_fg {
                    return Err(Error::format(format!("anchor class label {label} out of range")));
                }
                let slot = (label - 1) * n_k + next_slot[label - 1];
                if next_slot[label - 1] >= n_k {
                    return Err(Error::format("too many anchors for one class in pack"));
                }
                next_slot[label - 1] += 1;
                let mut row = Vec::with_capacity(dim);
                for _ in 0..dim {
                    row.push(c.f64()?);
                }
                lv.rows[slot] = row;
                lv.filled[slot] = true;
            }
            levels.push(lv);
        }
        if !c.is_done() {
            return Err(Error::format("trailing bytes after anchor pack"));
        }
        let levels: [AnchorLevel; NUM_LEVELS] = levels.try_into().expect("exactly four levels");
        Ok(AnchorBank { n_k, num_fg, levels })
    }
}

/// Group-mean pool a level descriptor down to `base_dim` channels, assuming
/// `desc.len()` is a power-of-two multiple of `base_dim`.
fn pool_to_base(desc: &[f64], base_dim: usize) -> Vec<f64> {
    let group = desc.len() / base_dim;
    (0..base_dim)
        .map(|i| desc[i * group..(i + 1) * group].iter().sum::<f64>() / group as f64)
        .collect()
}

/// Membership feature vector for one sample's class descriptors.
fn membership_vec(descs: &[Vec<f64>; NUM_LEVELS], feature: MembershipFeature, base_dim: usize) -> Vec<f64> {
    match feature {
        MembershipFeature::Level(l) => descs[l - 1].clone(),
        MembershipFeature::ConcatAll => {
            let mut out = Vec::with_capacity(4 * base_dim);
            for d in descs.iter() {
                out.extend(pool_to_base(d, base_dim));
            }
            out
        }
    }
}

/// Cluster per-sample descriptors into a fresh anchor bank.
pub fn cluster_fresh(
    samples: &[SampleDescriptors],
    n_k: usize,
    num_fg: usize,
    dims: [usize; NUM_LEVELS],
    feature: MembershipFeature,
    rng: &mut ChaCha8Rng,
) -> AnchorBank {
    let mut bank = AnchorBank::new(n_k, num_fg, dims);
    for c in 1..=num_fg {
        let present: Vec<&[Vec<f64>; NUM_LEVELS]> = samples
            .iter()
            .filter_map(|s| s.per_class[c - 1].as_ref())
            .collect();
        if present.is_empty() {
            continue;
        }
        let points: Vec<Vec<f64>> = present.iter().map(|d| membership_vec(d, feature, dims[0])).collect();
        let fit = kmeans(&points, n_k, rng, KMEANS_RESTARTS, KMEANS_ITERS);
        let k_eff = fit.centroids.len();
        // Per-cluster, per-level means over member samples.
        for l in 0..NUM_LEVELS {
            let mut sums = vec![vec![0.0; dims[l]]; k_eff];
            let mut counts = vec![0usize; k_eff];
            for (s, &a) in present.iter().zip(&fit.assignment) {
                counts[a] += 1;
                for (acc, v) in sums[a].iter_mut().zip(&s[l]) {
                    *acc += v;
                }
            }
            for ki in 0..k_eff {
                if counts[ki] == 0 {
                    continue;
                }
                for acc in sums[ki].iter_mut() {
                    *acc /= counts[ki] as f64;
                }
                let slot = (c - 1) * n_k + ki;
                bank.levels[l].rows[slot] = sums[ki].clone();
                bank.levels[l].filled[slot] = true;
            }
        }
    }
    bank
}

/// Binary mask (1.0 inside class `c`) from full-resolution labels.
pub fn class_mask(labels: &[u8], class: u8) -> Vec<f64> {
    labels.iter().map(|&l| if l == class { 1.0 } else { 0.0 }).collect()
}

/// Average-pool a square mask down `l - 1` times (to pyramid level `l`).
pub fn downsample_mask(mask: &[f64], size: usize, l: usize) -> Vec<f64> {
    let mut cur = mask.to_vec();
    let mut s = size;
    for _ in 1..l {
        let ns = s / 2;
        let mut next = vec![0.0; ns * ns];
        for y in 0..ns {
            for x in 0..ns {
                let base = 2 * y * s + 2 * x;
                next[y * ns + x] = 0.25 * (cur[base] + cur[base + 1] + cur[base + s] + cur[base + s + 1]);
            }
        }
        cur = next;
        s = ns;
    }
    cur
}

/// Masked average pooling: mean feature vector over the (soft) mask support.
/// `None` when the mask has no support at this resolution.
pub fn masked_descriptor(feat: &Tensor, mask: &[f64]) -> Option<Vec<f64>> {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    debug_assert_eq!(mask.len(), h * w);
    let total: f64 = mask.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut out = vec![0.0; c];
    for (ch, slot) in out.iter_mut().enumerate() {
        let plane = &feat.data()[ch * h * w..(ch + 1) * h * w];
        *slot = crate::tape::dot(plane, mask) / total;
    }
    Some(out)
}
