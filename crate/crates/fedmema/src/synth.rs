//! Synthetic multimodal lesion dataset.
//!
//! Each sample nests three elliptical regions on a flat background: edema
//! (ED) is the outer ellipse, the enhancing tumor (ET) a randomly offset and
//! randomly sized disc inside it, and the necrotic core (NET) another offset
//! disc inside ET. Because the inner structures wander within their parent,
//! an inner boundary can only be found by seeing its intensity contrast; it
//! is not recoverable from the outer outline.
//!
//! Four "modalities" image the same geometry with different class contrasts
//! against the background, and each modality leaves a different boundary
//! near the noise floor: edema fades out on t1 and t1c, the tumor drowns in
//! bright edema on t2, and the core blends into the tumor on flair. A
//! single-modality site therefore cannot master every class from its own
//! channel. A per-sample appearance phenotype rescales the class contrasts
//! in one of three distinct patterns, making each class's feature
//! distribution multi-modal — the structure that multiple anchors per class
//! exist to represent. Per-modality multiplicative jitter and additive
//! Gaussian noise sit on top.
//!
//! Federated shards may additionally be phenotype-skewed: each client's
//! private training shard over-samples one phenotype (as a site's scanner
//! and population would), while the server shard and all evaluation pools
//! stay uniform. Skewed sites face test-time phenotypes they rarely saw,
//! which is precisely the gap server-side prototypes exist to close.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::{put_f32, put_u32, put_u8, Cursor};

pub const NUM_MODALITIES: usize = 4;
pub const NUM_CLASSES: usize = 4;
pub const BG: u8 = 0;
pub const ED: u8 = 1;
pub const ET: u8 = 2;
pub const NET: u8 = 3;

/// Background intensity per modality.
pub const BASE: [f64; NUM_MODALITIES] = [0.30, 0.30, 0.25, 0.25];

/// Contrast of each foreground class against the background, per
/// `[modality][class - 1]` with classes ordered ED, ET, NET. What matters for
/// separability is the contrast *difference across each nested boundary*:
/// ED|BG is ~1 sigma on t1 and t1c, ET|ED ~1 sigma on t2, NET|ET ~1 sigma on
/// flair, while every other boundary sits several sigma clear.
pub const CONTRAST: [[f64; NUM_CLASSES - 1]; NUM_MODALITIES] = [
    [0.06, 0.28, 0.45], // t1
    [0.06, 0.65, 0.32], // t1c
    [0.60, 0.53, 0.30], // t2
    [0.65, 0.30, 0.23], // flair
];

/// Per-phenotype contrast gain for each foreground class (ED, ET, NET). The
/// three patterns shift classes in different directions, so one class's
/// appearance forms three distinct clusters rather than one smeared band.
pub const PHENOTYPE_GAIN: [[f64; NUM_CLASSES - 1]; 3] = [
    [0.90, 0.78, 1.18],
    [1.00, 1.00, 1.00],
    [1.10, 1.22, 0.82],
];
pub const NOISE_SIGMA: f64 = 0.06;

#[derive(Debug, Clone)]
pub struct FullSample {
    /// `4 * size * size`, modality-major.
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
    pub phenotype: u8,
}

impl FullSample {
    /// One modality plane as a `[1,s,s]` tensor.
    pub fn modality_plane(&self, m: usize, size: usize) -> Tensor {
        let hw = size * size;
        Tensor::from_vec(&[1, size, size], self.image[m * hw..(m + 1) * hw].to_vec()).expect("plane shape")
    }

    /// All modalities as a `[4,s,s]` tensor.
    pub fn full_tensor(&self, size: usize) -> Tensor {
        Tensor::from_vec(&[4, size, size], self.image.clone()).expect("full shape")
    }
}

/// Generate `n` samples of extent `size` with uniform phenotype frequencies,
/// consuming `rng` in a fixed order.
pub fn generate(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<FullSample> {
    let uniform = [1.0; 3];
    generate_mixed(n, size, rng, &|_| uniform)
}

/// Generate `n` samples, drawing sample `i`'s phenotype from the (relative)
/// weights `mix(i)`. Geometry, jitter, and noise are untouched by the mix.
pub fn generate_mixed(n: usize, size: usize, rng: &mut ChaCha8Rng, mix: &dyn Fn(usize) -> [f64; 3]) -> Vec<FullSample> {
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let s = size as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Edema ellipse; center and radius ranges keep it fully in frame.
        let cx = rng.gen_range(0.38..0.62) * s;
        let cy = rng.gen_range(0.38..0.62) * s;
        let r1 = rng.gen_range(0.22..0.30) * s;
        let aspect = rng.gen_range(0.75..1.25);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        // Enhancing tumor: a disc in the edema's normalized frame, offset so
        // it stays strictly inside the edema boundary.
        let f2 = rng.gen_range(0.52..0.72);
        let phi2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let m2 = rng.gen_range(0.0..1.0) * (1.0 - f2) * 0.85;
        let (u2x, u2y) = (m2 * phi2.cos(), m2 * phi2.sin());
        // Necrotic core inside the tumor, same construction one level down.
        let f3 = rng.gen_range(0.48..0.70) * f2;
        let phi3: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let m3 = rng.gen_range(0.0..1.0) * (f2 - f3) * 0.85;
        let (u3x, u3y) = (u2x + m3 * phi3.cos(), u2y + m3 * phi3.sin());
        let w = mix(i);
        let mut pick = rng.gen_range(0.0..w.iter().sum::<f64>());
        let mut phenotype = (w.len() - 1) as u8;
        for (p, wi) in w.iter().enumerate() {
            if pick < *wi {
                phenotype = p as u8;
                break;
            }
            pick -= wi;
        }
        let jitter: Vec<f64> = (0..NUM_MODALITIES).map(|_| rng.gen_range(0.95..1.05)).collect();

        let (ra, rb) = (r1 * aspect, r1 / aspect);
        let (ct, st) = (theta.cos(), theta.sin());
        let mut labels = vec![BG; size * size];
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = (dx * ct + dy * st) / ra;
                let v = (-dx * st + dy * ct) / rb;
                let d2 = ((u - u2x) * (u - u2x) + (v - u2y) * (v - u2y)).sqrt();
                let d3 = ((u - u3x) * (u - u3x) + (v - u3y) * (v - u3y)).sqrt();
                labels[y * size + x] = if d3 <= f3 {
                    NET
                } else if d2 <= f2 {
                    ET
                } else if (u * u + v * v).sqrt() <= 1.0 {
                    ED
                } else {
                    BG
                };
            }
        }
        let gain = &PHENOTYPE_GAIN[phenotype as usize];
        let mut image = vec![0.0; NUM_MODALITIES * size * size];
        for m in 0..NUM_MODALITIES {
            for p in 0..size * size {
                let class = labels[p] as usize;
                let contrast = if class == 0 { 0.0 } else { CONTRAST[m][class - 1] * gain[class - 1] };
                image[m * size * size + p] = (BASE[m] + contrast) * jitter[m] + noise.sample(rng);
            }
        }
        out.push(FullSample { image, labels, phenotype });
    }
    out
}

/// Index partition of a dataset across the server and the client sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub server: Vec<usize>,
    pub clients: Vec<Vec<usize>>,
}

/// Partition `n` samples. Setting 1: disjoint even split across the server
/// and `4 * cpm` clients. Setting 2: the server keeps the same share as in
/// setting 1; the rest is cut into `4*cpm + 1` equal blocks, the last of
/// which is common to every client.
pub fn partition(n: usize, setting: u8, cpm: usize) -> Result<Split> {
    if cpm == 0 {
        return Err(Error::data("clients_per_modality must be positive"));
    }
    let n_clients = 4 * cpm;
    let sites = n_clients + 1;
    let base = n / sites;
    if base * sites != n {
        return Err(Error::data(format!(
            "setting {setting}: {n} samples do not split evenly across {sites} sites"
        )));
    }
    match setting {
        1 => {
            let server = (0..base).collect();
            let clients = (0..n_clients)
                .map(|c| ((c + 1) * base..(c + 2) * base).collect())
                .collect();
            Ok(Split { server, clients })
        }
        2 => {
            let rest = n - base;
            let blocks = n_clients + 1;
            let bs = rest / blocks;
            if bs * blocks != rest {
                return Err(Error::data(format!(
                    "setting 2: remaining {rest} samples do not split into {blocks} blocks"
                )));
            }
            let server = (0..base).collect();
            let common: Vec<usize> = (base + n_clients * bs..n).collect();
            let clients = (0..n_clients)
                .map(|c| {
                    let mut idx: Vec<usize> = (base + c * bs..base + (c + 1) * bs).collect();
                    idx.extend_from_slice(&common);
                    idx
                })
                .collect();
            Ok(Split { server, clients })
        }
        other => Err(Error::config(format!("unknown data setting {other}"))),
    }
}

/// Per-index phenotype weights realizing a client skew of strength `skew` —
/// the probability mass on a client's favored phenotype, where `1/3` means
/// uniform. Client `c` favors phenotype `c % 3` on the indices private to it;
/// indices held by the server or shared by several clients stay uniform.
pub fn shard_phenotype_mix(split: &Split, n: usize, skew: f64) -> Vec<[f64; 3]> {
    const UNOWNED: usize = usize::MAX;
    const SHARED: usize = usize::MAX - 1;
    let mut owner = vec![UNOWNED; n];
    for (c, idx) in split.clients.iter().enumerate() {
        for &i in idx {
            owner[i] = if owner[i] == UNOWNED { c } else { SHARED };
        }
    }
    let off = (1.0 - skew) / 2.0;
    owner
        .into_iter()
        .map(|o| match o {
            UNOWNED | SHARED => [1.0 / 3.0; 3],
            c => {
                let mut w = [off; 3];
                w[c % 3] = skew;
                w
            }
        })
        .collect()
}

/// What one site actually stores. Clients hold exactly one modality plane;
/// the server holds all four.
#[derive(Debug, Clone)]
pub struct SiteData {
    /// `None` for the server, `Some(m)` for a single-modality client.
    pub modality: Option<usize>,
    pub image_size: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<Vec<u8>>,
}

impl SiteData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Modality of client `c` under round-robin assignment.
pub fn client_modality(client: usize) -> usize {
    client % NUM_MODALITIES
}

/// Materialize site datasets from a split. Client tensors contain only that
/// client's modality plane — other modalities never reach client memory.
pub fn build_sites(samples: &[FullSample], split: &Split, size: usize) -> (SiteData, Vec<SiteData>) {
    let server = SiteData {
        modality: None,
        image_size: size,
        images: split.server.iter().map(|&i| samples[i].full_tensor(size)).collect(),
        labels: split.server.iter().map(|&i| samples[i].labels.clone()).collect(),
    };
    let clients = split
        .clients
        .iter()
        .enumerate()
        .map(|(c, idx)| {
            let m = client_modality(c);
            SiteData {
                modality: Some(m),
                image_size: size,
                images: idx.iter().map(|&i| samples[i].modality_plane(m, size)).collect(),
                labels: idx.iter().map(|&i| samples[i].labels.clone()).collect(),
            }
        })
        .collect();
    (server, clients)
}

const FMDS_MAGIC: &[u8; 4] = b"FMDS";

/// Serialize a site dataset. Layout: magic, `u32 count`, `u32 size`, then per
/// sample `u8 modality mask`, `4*size*size` f32 planes (absent modalities
/// zero-filled), `size*size` u8 labels.
pub fn dump_fmds(site: &SiteData) -> Vec<u8> {
    let s = site.image_size;
    let hw = s * s;
    let mask: u8 = match site.modality {
        None => 0b1111,
        Some(m) => 1 << m,
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(FMDS_MAGIC);
    put_u32(&mut buf, site.len() as u32);
    put_u32(&mut buf, s as u32);
    for (img, labels) in site.images.iter().zip(&site.labels) {
        put_u8(&mut buf, mask);
        for m in 0..NUM_MODALITIES {
            if mask & (1 << m) != 0 {
                let plane_idx = match site.modality {
                    None => m,
                    Some(_) => 0,
                };
                let plane = &img.data()[plane_idx * hw..(plane_idx + 1) * hw];
                for &v in plane {
                    put_f32(&mut buf, v as f32);
                }
            } else {
                for _ in 0..hw {
                    put_f32(&mut buf, 0.0);
                }
            }
        }
        for &l in labels {
            put_u8(&mut buf, l);
        }
    }
    buf
}

/// Decode a site dataset dump.
pub fn load_fmds(bytes: &[u8]) -> Result<SiteData> {
    let mut c = Cursor::new(bytes);
    if c.take(4)? != FMDS_MAGIC {
        return Err(Error::format("bad dataset dump magic"));
    }
    let count = c.u32()? as usize;
    let size = c.u32()? as usize;
    if size == 0 || size > 1 << 12 {
        return Err(Error::format("implausible dataset extent"));
    }
    let hw = size * size;
    let mut modality: Option<Option<usize>> = None;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mask = c.u8()?;
        let this = match mask {
            0b1111 => None,
            m if m.count_ones() == 1 => Some(m.trailing_zeros() as usize),
            other => return Err(Error::format(format!("unsupported modality mask {other:#06b}"))),
        };
        match &modality {
            None => modality = Some(this),
            Some(prev) if *prev != this => {
                return Err(Error::format("inconsistent modality masks in dataset dump"))
            }
            _ => {}
        }
        let mut planes = vec![0.0f64; NUM_MODALITIES * hw];
        for v in planes.iter_mut() {
            *v = c.f32()? as f64;
        }
        let img = match this {
            None => Tensor::from_vec(&[4, size, size], planes)?,
            Some(m) => Tensor::from_vec(&[1, size, size], planes[m * hw..(m + 1) * hw].to_vec())?,
        };
        let lab = c.take(hw)?.to_vec();
        if let Some(&bad) = lab.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::format(format!("label {bad} out of range in dataset dump")));
        }
        images.push(img);
        labels.push(lab);
    }
    if !c.is_done() {
        return Err(Error::format("trailing bytes after dataset dump"));
    }
    Ok(SiteData {
        modality: modality.unwrap_or(None),
        image_size: size,
        images,
        labels,
    })
}

/// Best balanced accuracy of a single-threshold classifier separating pixel
/// intensities of `class_a` from `class_b` in one modality. This is the
/// strongest linear probe on raw pixels; it upper-bounds what any threshold
/// rule can read off that channel.
pub fn probe_accuracy(samples: &[FullSample], size: usize, modality: usize, class_a: u8, class_b: u8) -> f64 {
    let hw = size * size;
    let mut av: Vec<f64> = Vec::new();
    let mut bv: Vec<f64> = Vec::new();
    for sp in samples {
        for p in 0..hw {
            let v = sp.image[modality * hw + p];
            if sp.labels[p] == class_a {
                av.push(v);
            } else if sp.labels[p] == class_b {
                bv.push(v);
            }
        }
    }
    if av.is_empty() || bv.is_empty() {
        return 0.5;
    }
    av.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bv.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Sweep thresholds over the merged order; evaluate both polarities.
    let (na, nb) = (av.len() as f64, bv.len() as f64);
    let mut best = 0.5f64;
    let (mut ia, mut ib) = (0usize, 0usize);
    while ia < av.len() || ib < bv.len() {
        let take_a = match (av.get(ia), bv.get(ib)) {
            (Some(x), Some(y)) => x <= y,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => unreachable!(),
        };
        if take_a {
            ia += 1;
        } else {
            ib += 1;
        }
        // Threshold after this element: `ia` a's and `ib` b's lie at or below.
        let acc_a_low = 0.5 * (ia as f64 / na + (nb - ib as f64) / nb);
        best = best.max(acc_a_low).max(1.0 - acc_a_low);
    }
    best
}
