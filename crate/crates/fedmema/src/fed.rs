//! The federation engine: broadcast messages, client updates, per-modality
//! aggregation, server training with the shared auxiliary decoder, anchor
//! maintenance, per-round logging, and run artifacts.
//!
//! One round works like this (protocol modes):
//!   1. the server broadcasts its modality encoders plus the anchor pack,
//!   2. every client overwrites its encoder copy, trains locally with
//!      anchor-calibrated skip features, and returns the encoder update,
//!   3. encoder updates are averaged per modality (client-id order),
//!   4. the server trains encoders + fusion decoder + auxiliary decoder on
//!      its full-modal data,
//!   5. fresh anchors are clustered from fused features and folded into the
//!      bank by EMA.
//!
//! Baseline modes (`fedavg_all`, `fed_encoder_only`, `fed_decoder_only`)
//! use a single-encoder architecture on every site; the server never trains
//! and its reported metrics come from the plain average of client models.
//! `local_only` severs federation entirely: clients train alone and send
//! nothing, while the server trains its fused multimodal model on its own
//! data — the no-federation reference point for both sides.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorBank, SampleDescriptors};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lacca;
use crate::loss::{argmax_channels, mdsc, per_class_dsc, segmentation_loss};
use crate::nn::{self, NetConfig, Session, LEVELS, MODALITIES};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::rng;
use crate::synth::{self, FullSample, SiteData};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::wire::{self, Cursor};

/// Validation pool size, generated from the `data.val` stream.
pub const VAL_SAMPLES: usize = 50;
/// Test pool size, generated from the `data.test` stream.
pub const TEST_SAMPLES: usize = 100;
/// Per-round metrics are computed on this fixed prefix of the val pool.
pub const VAL_PROBE: usize = 16;
/// Weight of the shared auxiliary decoder term in the server loss.
pub const AUX_WEIGHT: f64 = 0.5;
/// Validation samples covered by an attention export.
pub const ATTN_SAMPLES: usize = 4;

// ---------------------------------------------------------------------------
// Broadcast message

const MESSAGE_MAGIC: &[u8; 4] = b"FMSG";
const MESSAGE_VERSION: u32 = 1;

/// Server-to-client message: weights subset plus the anchor pack, protected
/// by a trailing CRC32 over everything before it.
#[derive(Debug, Clone)]
pub struct Broadcast {
    pub round: u32,
    pub weights: ParamStore,
    pub anchor_pack: Vec<u8>,
}

impl Broadcast {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MESSAGE_MAGIC);
        wire::put_u32(&mut buf, MESSAGE_VERSION);
        wire::put_u32(&mut buf, self.round);
        let w = self.weights.to_bytes();
        wire::put_u32(&mut buf, w.len() as u32);
        buf.extend_from_slice(&w);
        wire::put_u32(&mut buf, self.anchor_pack.len() as u32);
        buf.extend_from_slice(&self.anchor_pack);
        let crc = wire::crc32(&buf);
        wire::put_u32(&mut buf, crc);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Broadcast> {
        if bytes.len() < 4 {
            return Err(Error::format("broadcast shorter than its checksum"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
        let computed = wire::crc32(body);
        if stored != computed {
            return Err(Error::format(format!(
                "broadcast checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
            )));
        }
        let mut cur = Cursor::new(body);
        if cur.take(4)? != MESSAGE_MAGIC {
            return Err(Error::format("broadcast magic mismatch"));
        }
        let version = cur.u32()?;
        if version != MESSAGE_VERSION {
            return Err(Error::format(format!("unsupported broadcast version {version}")));
        }
        let round = cur.u32()?;
        let wlen = cur.u32()? as usize;
        let weights = ParamStore::from_bytes(cur.take(wlen)?)?;
        let alen = cur.u32()? as usize;
        let anchor_pack = cur.take(alen)?.to_vec();
        if !cur.is_done() {
            return Err(Error::format("broadcast has trailing bytes"));
        }
        Ok(Broadcast { round, weights, anchor_pack })
    }
}

// ---------------------------------------------------------------------------
// Round records and summaries

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub id: usize,
    pub modality: String,
    pub loss: f64,
    pub mdsc: f64,
    pub per_class_dsc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub server_loss: f64,
    pub server_mdsc: f64,
    pub per_client: Vec<ClientRound>,
    pub anchor_drift_l2: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub id: usize,
    pub modality: String,
    pub mdsc: f64,
    pub per_class_dsc: Vec<f64>,
}

/// Final evaluation on the held-out test pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub mode: String,
    pub seed: u64,
    pub rounds: usize,
    pub server_mdsc: f64,
    pub server_per_class_dsc: Vec<f64>,
    pub mean_client_mdsc: f64,
    pub per_client: Vec<ClientSummary>,
}

/// True when two record sequences agree on everything but wall-clock times.
pub fn records_match_modulo_wall(a: &[RoundRecord], b: &[RoundRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let mut x = x.clone();
            let mut y = y.clone();
            x.wall_ms = 0;
            y.wall_ms = 0;
            x == y
        })
}

// ---------------------------------------------------------------------------
// Client state

struct ClientState {
    id: usize,
    modality: usize,
    enc_prefix: String,
    dec_prefix: String,
    /// Which parameters the broadcast overwrites (None: receives nothing).
    recv_prefix: Option<String>,
    /// Which parameters go back to the server (None: sends nothing).
    send_prefix: Option<String>,
    store: ParamStore,
    data: SiteData,
}

struct ClientOutcome {
    modality: usize,
    shared: ParamStore,
    record: ClientRound,
}

struct EvalStats {
    loss: f64,
    mdsc: f64,
    per_class: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Federation engine

pub struct Federation {
    cfg: ExperimentConfig,
    net: NetConfig,
    server_store: ParamStore,
    clients: Vec<ClientState>,
    server_data: SiteData,
    val: Vec<FullSample>,
    test: Vec<FullSample>,
    bank: AnchorBank,
    records: Vec<RoundRecord>,
}

impl Federation {
    pub fn new(cfg: ExperimentConfig) -> Result<Federation> {
        let net = cfg.net_config();
        net.validate()?;
        let seed = cfg.data.seed;
        let n = cfg.total_train_samples();
        let split = synth::partition(n, cfg.data.setting, cfg.federation.clients_per_modality)?;
        let mix = synth::shard_phenotype_mix(&split, n, cfg.data.phenotype_skew);
        let samples =
            synth::generate_mixed(n, net.image_size, &mut rng::stream(seed, "data.train"), &|i| mix[i]);
        let (server_data, client_sites) = synth::build_sites(&samples, &split, net.image_size);
        let val = synth::generate(VAL_SAMPLES, net.image_size, &mut rng::stream(seed, "data.val"));
        let test = synth::generate(TEST_SAMPLES, net.image_size, &mut rng::stream(seed, "data.test"));

        let mut server_store = ParamStore::new();
        let mut clients = Vec::with_capacity(client_sites.len());
        if cfg.ablation.mode.uses_fusion_server() {
            for m in MODALITIES {
                let mut r = rng::stream(seed, &format!("init.enc.{m}"));
                nn::init_encoder(&mut server_store, &format!("enc.{m}."), &net, &mut r);
            }
            nn::init_fusion_decoder(&mut server_store, "fus.", &net, &mut rng::stream(seed, "init.fus"));
            nn::init_pyramid_decoder(&mut server_store, "reg.", &net, &mut rng::stream(seed, "init.reg"));
            for (c, data) in client_sites.into_iter().enumerate() {
                let mi = data.modality.expect("client sites are single-modality");
                let enc_prefix = format!("enc.{}.", MODALITIES[mi]);
                let mut store = server_store.subset(&enc_prefix);
                let mut r = rng::stream(seed, &format!("init.pdec.{c}"));
                nn::init_pyramid_decoder(&mut store, "pdec.", &net, &mut r);
                clients.push(ClientState {
                    id: c,
                    modality: mi,
                    enc_prefix: enc_prefix.clone(),
                    dec_prefix: "pdec.".into(),
                    recv_prefix: Some(enc_prefix),
                    send_prefix: Some(format!("enc.{}.", MODALITIES[mi])),
                    store,
                    data,
                });
            }
        } else {
            // Baselines share one single-encoder architecture and one init.
            let mut proto = ParamStore::new();
            nn::init_encoder(&mut proto, "enc.mono.", &net, &mut rng::stream(seed, "init.mono.enc"));
            nn::init_pyramid_decoder(&mut proto, "dec.mono.", &net, &mut rng::stream(seed, "init.mono.dec"));
            let local = cfg.ablation.mode == crate::config::AblationMode::LocalOnly;
            let recv: Option<String> = match cfg.ablation.mode {
                crate::config::AblationMode::FedavgAll => Some(String::new()),
                crate::config::AblationMode::FedEncoderOnly => Some("enc.mono.".into()),
                crate::config::AblationMode::FedDecoderOnly => Some("dec.mono.".into()),
                crate::config::AblationMode::LocalOnly => None,
                _ => unreachable!("fusion modes handled above"),
            };
            for (c, data) in client_sites.into_iter().enumerate() {
                let mi = data.modality.expect("client sites are single-modality");
                clients.push(ClientState {
                    id: c,
                    modality: mi,
                    enc_prefix: "enc.mono.".into(),
                    dec_prefix: "dec.mono.".into(),
                    recv_prefix: recv.clone(),
                    send_prefix: if local { None } else { Some(String::new()) },
                    store: proto.clone(),
                    data,
                });
            }
            if local {
                // The server's no-federation baseline: the same fused
                // multimodal model the protocol server starts from, trained
                // on server data alone.
                for m in MODALITIES {
                    let mut r = rng::stream(seed, &format!("init.enc.{m}"));
                    nn::init_encoder(&mut server_store, &format!("enc.{m}."), &net, &mut r);
                }
                nn::init_fusion_decoder(&mut server_store, "fus.", &net, &mut rng::stream(seed, "init.fus"));
                nn::init_pyramid_decoder(&mut server_store, "reg.", &net, &mut rng::stream(seed, "init.reg"));
            } else {
                server_store = proto;
            }
        }

        let dims = [net.channels(1), net.channels(2), net.channels(3), net.channels(4)];
        let bank = AnchorBank::new(cfg.effective_n_k(), net.num_classes - 1, dims);
        Ok(Federation {
            cfg,
            net,
            server_store,
            clients,
            server_data,
            val,
            test,
            bank,
            records: Vec::new(),
        })
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn server_store(&self) -> &ParamStore {
        &self.server_store
    }

    pub fn client_store(&self, id: usize) -> &ParamStore {
        &self.clients[id].store
    }

    pub fn bank(&self) -> &AnchorBank {
        &self.bank
    }

    /// Anchor machinery runs only for protocol modes with calibration on.
    pub fn anchors_active(&self) -> bool {
        self.cfg.ablation.mode.uses_fusion_server() && self.cfg.lacca.enabled
    }

    fn broadcast_prefix(&self) -> Option<String> {
        use crate::config::AblationMode::*;
        match self.cfg.ablation.mode {
            Full | NoLacca | MonoAnchor => Some("enc.".into()),
            FedavgAll => Some(String::new()),
            FedEncoderOnly => Some("enc.mono.".into()),
            FedDecoderOnly => Some("dec.mono.".into()),
            LocalOnly => None,
        }
    }

    /// Run round 0 (server warm-up and anchor seeding) plus all federated
    /// rounds, filling the record log.
    pub fn run_rounds(&mut self) -> Result<()> {
        assert!(self.records.is_empty(), "run_rounds is one-shot");
        while self.records.len() <= self.cfg.federation.rounds {
            self.step()?;
        }
        Ok(())
    }

    /// Advance the federation by exactly one round: round 0 first, then one
    /// federated round per call. Appends one record per call, so callers can
    /// inspect stores and the anchor bank between rounds.
    pub fn step(&mut self) -> Result<()> {
        match self.records.len() {
            0 => self.round_zero(),
            r => self.one_round(r),
        }
    }

    /// The exact envelope the server would send to every site at the start of
    /// federated round `round`, given current server state. `None` when the
    /// mode broadcasts nothing.
    pub fn broadcast_message(&self, round: usize) -> Option<Vec<u8>> {
        let prefix = self.broadcast_prefix()?;
        let pack = if self.anchors_active() && self.bank.any_filled() {
            self.bank.pack()
        } else {
            Vec::new()
        };
        Some(
            Broadcast {
                round: round as u32,
                weights: self.server_store.subset(&prefix),
                anchor_pack: pack,
            }
            .encode(),
        )
    }

    /// The parameter subset site `id` ships back to the server, given its
    /// current store — after a `step`, exactly what that round carried.
    /// `None` when the mode sends nothing upstream.
    pub fn client_uplink(&self, id: usize) -> Option<ParamStore> {
        let st = &self.clients[id];
        st.send_prefix.as_ref().map(|p| st.store.subset(p))
    }

    fn round_zero(&mut self) -> Result<()> {
        let t = Instant::now();
        let (server_loss, server_mdsc, drift);
        if self.cfg.ablation.mode.server_trains_fusion() {
            let loss = self.server_train_round(0)?;
            drift = if self.anchors_active() { self.refresh_anchors()? } else { 0.0 };
            let probe = &self.val[..VAL_PROBE.min(self.val.len())];
            let e = eval_fusion_server(&self.net, &self.server_store, probe)?;
            server_loss = loss;
            server_mdsc = e.mdsc;
        } else {
            let probe = &self.val[..VAL_PROBE.min(self.val.len())];
            let e = eval_mono_server(&self.net, &self.server_store, probe)?;
            server_loss = e.loss;
            server_mdsc = e.mdsc;
            drift = 0.0;
        }
        self.records.push(RoundRecord {
            round: 0,
            server_loss,
            server_mdsc,
            per_client: Vec::new(),
            anchor_drift_l2: drift,
            wall_ms: t.elapsed().as_millis() as u64,
        });
        Ok(())
    }

    fn one_round(&mut self, r: usize) -> Result<()> {
        let t = Instant::now();
        let msg_bytes: Option<Vec<u8>> = self.broadcast_message(r);

        let outcomes = self.run_clients(msg_bytes.as_deref(), r)?;

        let (server_loss, server_mdsc, drift);
        if self.cfg.ablation.mode.server_trains_fusion() {
            if self.cfg.ablation.mode.uses_fusion_server() {
                self.aggregate_encoders(&outcomes)?;
            }
            let loss = self.server_train_round(r)?;
            drift = if self.anchors_active() { self.refresh_anchors()? } else { 0.0 };
            let probe = &self.val[..VAL_PROBE.min(self.val.len())];
            let e = eval_fusion_server(&self.net, &self.server_store, probe)?;
            server_loss = loss;
            server_mdsc = e.mdsc;
        } else {
            // The server's view of a shared-model baseline: the plain average
            // of every client model, evaluated per modality channel.
            let stores: Vec<&ParamStore> = outcomes.iter().map(|o| &o.shared).collect();
            self.server_store = ParamStore::mean(&stores)?;
            let probe = &self.val[..VAL_PROBE.min(self.val.len())];
            let e = eval_mono_server(&self.net, &self.server_store, probe)?;
            server_loss = e.loss;
            server_mdsc = e.mdsc;
            drift = 0.0;
        }

        let per_client: Vec<ClientRound> = outcomes.into_iter().map(|o| o.record).collect();
        log::info!(
            "round {r}: server_loss={server_loss:.4} server_mdsc={server_mdsc:.4} drift={drift:.3e}"
        );
        self.records.push(RoundRecord {
            round: r,
            server_loss,
            server_mdsc,
            per_client,
            anchor_drift_l2: drift,
            wall_ms: t.elapsed().as_millis() as u64,
        });
        Ok(())
    }

    /// Run every client's local update, possibly across worker threads.
    /// Results are deterministic and ordered by client id regardless of
    /// `run.parallelism`.
    fn run_clients(&mut self, msg: Option<&[u8]>, round: usize) -> Result<Vec<ClientOutcome>> {
        let cfg = &self.cfg;
        let net = &self.net;
        let probe = &self.val[..VAL_PROBE.min(self.val.len())];
        let par = cfg.run.parallelism.min(self.clients.len()).max(1);
        let chunk = self.clients.len().div_ceil(par);
        let chunks: Vec<&mut [ClientState]> = self.clients.chunks_mut(chunk).collect();
        let joined: Vec<Result<Vec<ClientOutcome>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|states| {
                    s.spawn(move || {
                        states
                            .iter_mut()
                            .map(|st| client_update(cfg, net, st, msg, round, probe))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::data("client worker panicked"))))
                .collect()
        });
        let mut out = Vec::new();
        for r in joined {
            out.extend(r?);
        }
        // Chunking preserves client order, so aggregation (and the log) see
        // ids 0..n no matter how many workers ran.
        debug_assert!(out.iter().enumerate().all(|(i, o)| o.record.id == i));
        Ok(out)
    }

    /// Per-modality unweighted mean over client encoder updates, applied to
    /// the server's encoders. Clients are visited in id order.
    fn aggregate_encoders(&mut self, outcomes: &[ClientOutcome]) -> Result<()> {
        for (mi, mname) in MODALITIES.iter().enumerate() {
            let group: Vec<&ParamStore> = outcomes
                .iter()
                .filter(|o| o.modality == mi)
                .map(|o| &o.shared)
                .collect();
            if group.is_empty() {
                return Err(Error::data(format!("no client covers modality {mname}")));
            }
            let avg = ParamStore::mean(&group)?;
            self.server_store.overwrite_prefix_from(&avg, &format!("enc.{mname}."));
        }
        Ok(())
    }

    fn server_train_round(&mut self, round: usize) -> Result<f64> {
        let cfg = &self.cfg;
        let net = &self.net;
        let mut adam = Adam::new(cfg.adam_config());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for e in 0..cfg.federation.epochs_per_round {
            let mut order = rng::stream(cfg.data.seed, &format!("server.round.{round}.epoch.{e}"));
            for idxs in epoch_batches(self.server_data.len(), cfg.optim.batch_size, &mut order) {
                loss_sum +=
                    server_train_batch(net, &mut self.server_store, &mut adam, &self.server_data, &idxs)?;
                batches += 1;
            }
        }
        Ok(if batches == 0 { 0.0 } else { loss_sum / batches as f64 })
    }

    /// Cluster fresh anchors from fused server features and fold them into
    /// the bank. Returns the L2 drift over matched slots.
    fn refresh_anchors(&mut self) -> Result<f64> {
        let net = &self.net;
        let cfg = &self.cfg;
        let size = net.image_size;
        let nfg = net.num_classes - 1;
        let mut descs = Vec::with_capacity(self.server_data.len());
        for i in 0..self.server_data.len() {
            let mut sess = Session::new(&self.server_store);
            let pyramids = forward_all_encoders(&mut sess, net, &self.server_data.images[i])?;
            let (_logits, fused) = nn::fusion_decoder_forward(&mut sess, "fus.", net, &pyramids)?;
            let labels = &self.server_data.labels[i];
            let mut per_class = Vec::with_capacity(nfg);
            for c in 1..=nfg {
                let mask = anchors::class_mask(labels, c as u8);
                let mut levels: [Vec<f64>; LEVELS] = Default::default();
                let mut ok = true;
                for l in 1..=LEVELS {
                    let ml = anchors::downsample_mask(&mask, size, l);
                    match anchors::masked_descriptor(sess.tape.value(fused[l - 1]), &ml) {
                        Some(d) => levels[l - 1] = d,
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                per_class.push(if ok { Some(levels) } else { None });
            }
            descs.push(SampleDescriptors { per_class });
        }
        let dims = [net.channels(1), net.channels(2), net.channels(3), net.channels(4)];
        // Re-seeded every refresh so identical features yield identical
        // clusterings (a frozen model implies a frozen bank up to EMA).
        let mut krng = rng::stream(cfg.data.seed, "anchors.kmeans");
        let fresh = anchors::cluster_fresh(
            &descs,
            cfg.effective_n_k(),
            nfg,
            dims,
            cfg.membership_feature(),
            &mut krng,
        );
        self.bank.ema_update(&fresh, cfg.anchors.omega, cfg.membership_feature())
    }

    /// Final evaluation of every site on the held-out test pool.
    pub fn summarize(&self) -> Result<Summary> {
        let bank = if self.anchors_active() && self.bank.any_filled() {
            Some(&self.bank)
        } else {
            None
        };
        let mut per_client = Vec::with_capacity(self.clients.len());
        let mut mean_md = 0.0;
        for st in &self.clients {
            let e = eval_client(
                &self.net,
                self.cfg.lacca.heads,
                &st.store,
                &st.enc_prefix,
                &st.dec_prefix,
                bank,
                st.modality,
                &self.test,
            )?;
            mean_md += e.mdsc;
            per_client.push(ClientSummary {
                id: st.id,
                modality: MODALITIES[st.modality].into(),
                mdsc: e.mdsc,
                per_class_dsc: e.per_class,
            });
        }
        mean_md /= self.clients.len() as f64;
        let server_eval = if self.cfg.ablation.mode.server_trains_fusion() {
            eval_fusion_server(&self.net, &self.server_store, &self.test)?
        } else {
            eval_mono_server(&self.net, &self.server_store, &self.test)?
        };
        Ok(Summary {
            experiment: self.cfg.experiment.name.clone(),
            mode: self.cfg.ablation.mode.as_str().into(),
            seed: self.cfg.data.seed,
            rounds: self.cfg.federation.rounds,
            server_mdsc: server_eval.mdsc,
            server_per_class_dsc: server_eval.per_class,
            mean_client_mdsc: mean_md,
            per_client,
        })
    }

    fn server_data(&self) -> &SiteData {
        &self.server_data
    }
}

// ---------------------------------------------------------------------------
// Client-side work (free functions so worker threads can call them)

fn client_update(
    cfg: &ExperimentConfig,
    net: &NetConfig,
    st: &mut ClientState,
    msg: Option<&[u8]>,
    round: usize,
    val_probe: &[FullSample],
) -> Result<ClientOutcome> {
    let mut bank = None;
    if let (Some(prefix), Some(bytes)) = (&st.recv_prefix, msg) {
        let m = Broadcast::decode(bytes)?;
        if m.round as usize != round {
            return Err(Error::data(format!(
                "client {} received a round-{} message during round {round}",
                st.id, m.round
            )));
        }
        st.store.overwrite_prefix_from(&m.weights, prefix);
        if cfg.lacca.enabled && !m.anchor_pack.is_empty() {
            bank = Some(AnchorBank::unpack(&m.anchor_pack)?);
        }
    }

    let mut adam = Adam::new(cfg.adam_config());
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for e in 0..cfg.federation.epochs_per_round {
        let mut order = rng::stream(cfg.data.seed, &format!("client.{}.round.{round}.epoch.{e}", st.id));
        for idxs in epoch_batches(st.data.len(), cfg.optim.batch_size, &mut order) {
            loss_sum += train_client_batch(
                net,
                cfg.lacca.heads,
                &mut st.store,
                &mut adam,
                &st.data,
                &idxs,
                bank.as_ref(),
                &st.enc_prefix,
                &st.dec_prefix,
            )?;
            batches += 1;
        }
    }
    let train_loss = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
    let eval = eval_client(
        net,
        cfg.lacca.heads,
        &st.store,
        &st.enc_prefix,
        &st.dec_prefix,
        bank.as_ref(),
        st.modality,
        val_probe,
    )?;
    Ok(ClientOutcome {
        modality: st.modality,
        shared: match &st.send_prefix {
            Some(p) => st.store.subset(p),
            None => ParamStore::new(),
        },
        record: ClientRound {
            id: st.id,
            modality: MODALITIES[st.modality].into(),
            loss: train_loss,
            mdsc: eval.mdsc,
            per_class_dsc: eval.per_class,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn train_client_batch(
    net: &NetConfig,
    heads: usize,
    store: &mut ParamStore,
    adam: &mut Adam,
    data: &SiteData,
    idxs: &[usize],
    bank: Option<&AnchorBank>,
    enc_prefix: &str,
    dec_prefix: &str,
) -> Result<f64> {
    let (loss_value, grads) = {
        let mut sess = Session::new(&*store);
        let mut acc: Option<Var> = None;
        for &i in idxs {
            let x = sess.input(data.images[i].clone())?;
            let feats = nn::encoder_forward(&mut sess, enc_prefix, net, x)?;
            let feats = calibrated(&mut sess, feats, bank, heads)?;
            let logits = nn::pyramid_decoder_forward(&mut sess, dec_prefix, net, &feats)?;
            let l = segmentation_loss(&mut sess.tape, logits, &data.labels[i], net.num_classes)?;
            acc = Some(match acc {
                None => l,
                Some(a) => sess.tape.add(a, l)?,
            });
        }
        let sum = acc.ok_or_else(|| Error::data("empty training batch"))?;
        let total = sess.tape.scale(sum, 1.0 / idxs.len() as f64)?;
        (sess.tape.value(total).item(), sess.backward_grads(total)?)
    };
    adam.step(store, &grads)?;
    Ok(loss_value)
}

/// Residual cross-attention calibration of skip features against the anchor
/// bank; levels without filled anchors pass through untouched.
fn calibrated(
    sess: &mut Session,
    feats: [Var; LEVELS],
    bank: Option<&AnchorBank>,
    heads: usize,
) -> Result<[Var; LEVELS]> {
    let Some(bank) = bank else { return Ok(feats) };
    let mut out = feats;
    for l in 1..=LEVELS {
        if let Some((mat, _classes)) = bank.level_matrix(l) {
            let cal = lacca::calibrate(&mut sess.tape, feats[l - 1], &mat, heads)?;
            out[l - 1] = sess.tape.add(feats[l - 1], cal.output)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Server-side work

fn server_train_batch(
    net: &NetConfig,
    store: &mut ParamStore,
    adam: &mut Adam,
    data: &SiteData,
    idxs: &[usize],
) -> Result<f64> {
    let (loss_value, grads) = {
        let mut sess = Session::new(&*store);
        let mut acc: Option<Var> = None;
        for &i in idxs {
            let l = server_sample_loss(&mut sess, net, &data.images[i], &data.labels[i])?;
            acc = Some(match acc {
                None => l,
                Some(a) => sess.tape.add(a, l)?,
            });
        }
        let sum = acc.ok_or_else(|| Error::data("empty training batch"))?;
        let total = sess.tape.scale(sum, 1.0 / idxs.len() as f64)?;
        (sess.tape.value(total).item(), sess.backward_grads(total)?)
    };
    adam.step(store, &grads)?;
    Ok(loss_value)
}

/// Fused segmentation loss plus the shared auxiliary decoder applied to each
/// modality pyramid (weighted by `AUX_WEIGHT`).
fn server_sample_loss(sess: &mut Session, net: &NetConfig, image: &Tensor, labels: &[u8]) -> Result<Var> {
    let pyramids = forward_all_encoders(sess, net, image)?;
    let (logits, _fused) = nn::fusion_decoder_forward(sess, "fus.", net, &pyramids)?;
    let main = segmentation_loss(&mut sess.tape, logits, labels, net.num_classes)?;
    let mut aux_acc: Option<Var> = None;
    for p in &pyramids {
        let alogits = nn::pyramid_decoder_forward(sess, "reg.", net, p)?;
        let al = segmentation_loss(&mut sess.tape, alogits, labels, net.num_classes)?;
        aux_acc = Some(match aux_acc {
            None => al,
            Some(a) => sess.tape.add(a, al)?,
        });
    }
    let aux_mean = sess.tape.scale(aux_acc.expect("four pyramids"), 1.0 / MODALITIES.len() as f64)?;
    let aux = sess.tape.scale(aux_mean, AUX_WEIGHT)?;
    sess.tape.add(main, aux)
}

fn forward_all_encoders(sess: &mut Session, net: &NetConfig, image: &Tensor) -> Result<Vec<[Var; LEVELS]>> {
    let size = net.image_size;
    let mut pyramids = Vec::with_capacity(MODALITIES.len());
    for (mi, mname) in MODALITIES.iter().enumerate() {
        let x = sess.input(plane_of(image, mi, size))?;
        pyramids.push(nn::encoder_forward(sess, &format!("enc.{mname}."), net, x)?);
    }
    Ok(pyramids)
}

fn plane_of(image: &Tensor, m: usize, size: usize) -> Tensor {
    let hw = size * size;
    Tensor::from_vec(&[1, size, size], image.data()[m * hw..(m + 1) * hw].to_vec())
        .expect("plane slice matches shape")
}

// ---------------------------------------------------------------------------
// Evaluation

#[allow(clippy::too_many_arguments)]
fn eval_client(
    net: &NetConfig,
    heads: usize,
    store: &ParamStore,
    enc_prefix: &str,
    dec_prefix: &str,
    bank: Option<&AnchorBank>,
    modality: usize,
    samples: &[FullSample],
) -> Result<EvalStats> {
    let size = net.image_size;
    let nfg = net.num_classes - 1;
    let mut loss_sum = 0.0;
    let mut md_sum = 0.0;
    let mut pc_sum = vec![0.0; nfg];
    for s in samples {
        let mut sess = Session::new(store);
        let x = sess.input(s.modality_plane(modality, size))?;
        let feats = nn::encoder_forward(&mut sess, enc_prefix, net, x)?;
        let feats = calibrated(&mut sess, feats, bank, heads)?;
        let logits = nn::pyramid_decoder_forward(&mut sess, dec_prefix, net, &feats)?;
        let lv = segmentation_loss(&mut sess.tape, logits, &s.labels, net.num_classes)?;
        loss_sum += sess.tape.value(lv).item();
        let pred = argmax_channels(sess.tape.value(logits));
        md_sum += mdsc(&pred, &s.labels, net.num_classes);
        for (a, d) in pc_sum.iter_mut().zip(per_class_dsc(&pred, &s.labels, net.num_classes)) {
            *a += d;
        }
    }
    let n = samples.len() as f64;
    for a in pc_sum.iter_mut() {
        *a /= n;
    }
    Ok(EvalStats { loss: loss_sum / n, mdsc: md_sum / n, per_class: pc_sum })
}

fn eval_fusion_server(net: &NetConfig, store: &ParamStore, samples: &[FullSample]) -> Result<EvalStats> {
    let size = net.image_size;
    let nfg = net.num_classes - 1;
    let mut loss_sum = 0.0;
    let mut md_sum = 0.0;
    let mut pc_sum = vec![0.0; nfg];
    for s in samples {
        let mut sess = Session::new(store);
        let image = s.full_tensor(size);
        let pyramids = forward_all_encoders(&mut sess, net, &image)?;
        let (logits, _fused) = nn::fusion_decoder_forward(&mut sess, "fus.", net, &pyramids)?;
        let lv = segmentation_loss(&mut sess.tape, logits, &s.labels, net.num_classes)?;
        loss_sum += sess.tape.value(lv).item();
        let pred = argmax_channels(sess.tape.value(logits));
        md_sum += mdsc(&pred, &s.labels, net.num_classes);
        for (a, d) in pc_sum.iter_mut().zip(per_class_dsc(&pred, &s.labels, net.num_classes)) {
            *a += d;
        }
    }
    let n = samples.len() as f64;
    for a in pc_sum.iter_mut() {
        *a /= n;
    }
    Ok(EvalStats { loss: loss_sum / n, mdsc: md_sum / n, per_class: pc_sum })
}

/// Evaluate a single-encoder model on every modality channel of full-modal
/// samples; metrics are the mean over the four channels.
fn eval_mono_server(net: &NetConfig, store: &ParamStore, samples: &[FullSample]) -> Result<EvalStats> {
    let size = net.image_size;
    let nfg = net.num_classes - 1;
    let mut loss_sum = 0.0;
    let mut md_sum = 0.0;
    let mut pc_sum = vec![0.0; nfg];
    for s in samples {
        for m in 0..MODALITIES.len() {
            let mut sess = Session::new(store);
            let x = sess.input(s.modality_plane(m, size))?;
            let feats = nn::encoder_forward(&mut sess, "enc.mono.", net, x)?;
            let logits = nn::pyramid_decoder_forward(&mut sess, "dec.mono.", net, &feats)?;
            let lv = segmentation_loss(&mut sess.tape, logits, &s.labels, net.num_classes)?;
            loss_sum += sess.tape.value(lv).item();
            let pred = argmax_channels(sess.tape.value(logits));
            md_sum += mdsc(&pred, &s.labels, net.num_classes);
            for (a, d) in pc_sum.iter_mut().zip(per_class_dsc(&pred, &s.labels, net.num_classes)) {
                *a += d;
            }
        }
    }
    let n = (samples.len() * MODALITIES.len()) as f64;
    for a in pc_sum.iter_mut() {
        *a /= n;
    }
    Ok(EvalStats { loss: loss_sum / n, mdsc: md_sum / n, per_class: pc_sum })
}

fn epoch_batches(n: usize, batch: usize, order: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(order);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

// ---------------------------------------------------------------------------
// Top-level run with artifacts

pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

/// Run a full experiment and write the run directory:
/// `config.toml`, `rounds.jsonl`, `summary.json`, `server/` (checkpoint,
/// dataset, anchor pack) and `sites/site_<id>/` (personal model, dataset).
pub fn execute(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(run_dir.join("server"))?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml_string())?;

    let mut fed = Federation::new(cfg.clone())?;
    fed.run_rounds()?;
    let summary = fed.summarize()?;

    let mut lines = String::new();
    for r in fed.records() {
        lines.push_str(&serde_json::to_string(r).map_err(|e| Error::format(e.to_string()))?);
        lines.push('\n');
    }
    std::fs::write(run_dir.join("rounds.jsonl"), lines)?;
    let pretty = serde_json::to_string_pretty(&summary).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(run_dir.join("summary.json"), pretty + "\n")?;

    fed.server_store().save(&run_dir.join("server").join("checkpoint.fmem"))?;
    std::fs::write(run_dir.join("server").join("data.fmds"), synth::dump_fmds(fed.server_data()))?;
    if fed.anchors_active() && fed.bank().any_filled() {
        std::fs::write(run_dir.join("server").join("anchors.bin"), fed.bank().pack())?;
    }
    for st in &fed.clients {
        let dir = run_dir.join("sites").join(format!("site_{}", st.id));
        std::fs::create_dir_all(&dir)?;
        st.store.save(&dir.join("personal.fmem"))?;
        std::fs::write(dir.join("data.fmds"), synth::dump_fmds(&st.data))?;
    }
    log::info!(
        "run `{}` finished: mode={} server_mdsc={:.4} mean_client_mdsc={:.4}",
        cfg.experiment.name,
        summary.mode,
        summary.server_mdsc,
        summary.mean_client_mdsc
    );
    Ok(RunArtifacts { run_dir, records: fed.records, summary })
}

#[derive(Debug, Serialize)]
struct AttnRecord<'a> {
    sample: usize,
    modality: &'a str,
    level: usize,
    tokens: usize,
    anchor_classes: Vec<u8>,
    attention: Vec<f64>,
}

/// Recompute anchor attention maps for a finished run. Needs only the server
/// artifacts (checkpoint + anchor pack) and the run's config; writes
/// `attn/attention.jsonl` inside the run directory.
pub fn export_attention(run_dir: &Path) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let store = ParamStore::load(&run_dir.join("server").join("checkpoint.fmem"))?;
    let pack_path = run_dir.join("server").join("anchors.bin");
    let pack = std::fs::read(&pack_path).map_err(|e| {
        Error::data(format!(
            "no anchor pack at {} (was this run calibrated?): {e}",
            pack_path.display()
        ))
    })?;
    let bank = AnchorBank::unpack(&pack)?;
    let net = cfg.net_config();
    let val = synth::generate(VAL_SAMPLES, net.image_size, &mut rng::stream(cfg.data.seed, "data.val"));

    let mut lines = String::new();
    for (si, sample) in val.iter().take(ATTN_SAMPLES).enumerate() {
        for (mi, mname) in MODALITIES.iter().enumerate() {
            let mut sess = Session::new(&store);
            let x = sess.input(sample.modality_plane(mi, net.image_size))?;
            let feats = nn::encoder_forward(&mut sess, &format!("enc.{mname}."), &net, x)?;
            for l in 1..=LEVELS {
                if let Some((mat, classes)) = bank.level_matrix(l) {
                    let cal = lacca::calibrate(&mut sess.tape, feats[l - 1], &mat, cfg.lacca.heads)?;
                    let rec = AttnRecord {
                        sample: si,
                        modality: mname,
                        level: l,
                        tokens: cal.attention.shape()[0],
                        anchor_classes: classes,
                        attention: cal.attention.data().to_vec(),
                    };
                    lines.push_str(&serde_json::to_string(&rec).map_err(|e| Error::format(e.to_string()))?);
                    lines.push('\n');
                }
            }
        }
    }
    let out_dir = run_dir.join("attn");
    std::fs::create_dir_all(&out_dir)?;
    let out = out_dir.join("attention.jsonl");
    std::fs::write(&out, lines)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny_cfg(name: &str, mode: &str, out: &Path) -> ExperimentConfig {
        let text = format!(
            r#"
[experiment]
name = "{name}"
[data]
setting = 1
samples_per_site = 4
image_size = 16
seed = 33
[model]
base_width = 8
[federation]
rounds = 2
epochs_per_round = 1
[optim]
lr = 0.001
batch_size = 2
[ablation]
mode = "{mode}"
[run]
out_dir = "{}"
"#,
            out.display()
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn broadcast_roundtrip_is_bit_exact() {
        let mut w = ParamStore::new();
        w.insert("enc.t1.b1.c1.w", Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap());
        w.insert("enc.t2.b1.c1.b", Tensor::from_vec(&[2], vec![0.25, -0.75]).unwrap());
        let msg = Broadcast { round: 7, weights: w, anchor_pack: vec![1, 2, 3, 4, 5] };
        let bytes = msg.encode();
        let back = Broadcast::decode(&bytes).unwrap();
        assert_eq!(back.round, 7);
        assert_eq!(back.anchor_pack, vec![1, 2, 3, 4, 5]);
        assert_eq!(back.weights.to_bytes(), msg.weights.to_bytes());
    }

    #[test]
    fn broadcast_rejects_corruption() {
        let mut w = ParamStore::new();
        w.insert("enc.t1.x", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let bytes = Broadcast { round: 1, weights: w, anchor_pack: vec![9, 9] }.encode();
        // Flip one bit at several positions, truncate, extend.
        for pos in [0usize, 4, 9, bytes.len() / 2, bytes.len() - 2] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(Broadcast::decode(&bad).is_err(), "corruption at {pos} accepted");
        }
        assert!(Broadcast::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Broadcast::decode(&longer).is_err());
        assert!(Broadcast::decode(&[]).is_err());
    }

    #[test]
    fn protocol_round_produces_expected_log_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg("shape", "full", dir.path());
        let mut fed = Federation::new(cfg).unwrap();
        fed.run_rounds().unwrap();
        let recs = fed.records();
        assert_eq!(recs.len(), 3); // round 0 + 2 federated rounds
        assert_eq!(recs[0].round, 0);
        assert!(recs[0].per_client.is_empty());
        for (i, r) in recs.iter().enumerate().skip(1) {
            assert_eq!(r.round, i);
            assert_eq!(r.per_client.len(), 4);
            let mods: Vec<&str> = r.per_client.iter().map(|c| c.modality.as_str()).collect();
            assert_eq!(mods, vec!["t1", "t1c", "t2", "flair"]);
            for c in &r.per_client {
                assert!(c.mdsc.is_finite() && (0.0..=1.0).contains(&c.mdsc));
                assert_eq!(c.per_class_dsc.len(), 3);
            }
        }
        assert!(fed.bank().any_filled());
        let summary = fed.summarize().unwrap();
        assert_eq!(summary.per_client.len(), 4);
        assert!((0.0..=1.0).contains(&summary.server_mdsc));
        assert!((0.0..=1.0).contains(&summary.mean_client_mdsc));
    }

    #[test]
    fn parallel_and_serial_clients_agree_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg("par", "full", dir.path());
        cfg.run.parallelism = 1;
        let mut fed1 = Federation::new(cfg.clone()).unwrap();
        fed1.run_rounds().unwrap();
        cfg.run.parallelism = 4;
        let mut fed4 = Federation::new(cfg).unwrap();
        fed4.run_rounds().unwrap();
        assert!(records_match_modulo_wall(fed1.records(), fed4.records()));
        assert_eq!(fed1.server_store().to_bytes(), fed4.server_store().to_bytes());
        for id in 0..4 {
            assert_eq!(fed1.client_store(id).to_bytes(), fed4.client_store(id).to_bytes());
        }
    }

    #[test]
    fn zero_epochs_keep_baseline_weights_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg("noop", "fedavg_all", dir.path());
        cfg.federation.epochs_per_round = 0;
        let mut fed = Federation::new(cfg).unwrap();
        let before = fed.server_store().to_bytes();
        fed.run_rounds().unwrap();
        // Identical, untrained clients average back to the exact init.
        assert_eq!(fed.server_store().to_bytes(), before);
        for id in 0..4 {
            assert_eq!(fed.client_store(id).subset("").to_bytes(), before);
        }
    }

    #[test]
    fn local_only_never_broadcasts_and_still_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg("solo", "local_only", dir.path());
        let mut fed = Federation::new(cfg).unwrap();
        fed.run_rounds().unwrap();
        for r in fed.records() {
            assert_eq!(r.anchor_drift_l2, 0.0);
        }
        assert!(!fed.bank().any_filled());
        // Clients trained on different data must have diverged from each other.
        assert_ne!(fed.client_store(0).subset("enc.mono.").to_bytes(), fed.client_store(1).subset("enc.mono.").to_bytes());
        // The server trains its own fused model and never sees client weights.
        assert!(!fed.server_store().subset("fus.").is_empty());
        assert!(fed.server_store().subset("enc.mono.").is_empty());
        assert!(fed.records().iter().skip(1).any(|r| r.server_loss > 0.0));
    }

    #[test]
    fn execute_writes_complete_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg("artifacts", "full", dir.path());
        let art = execute(&cfg).unwrap();
        let rd = &art.run_dir;
        for f in ["config.toml", "rounds.jsonl", "summary.json"] {
            assert!(rd.join(f).is_file(), "missing {f}");
        }
        for f in ["checkpoint.fmem", "data.fmds", "anchors.bin"] {
            assert!(rd.join("server").join(f).is_file(), "missing server/{f}");
        }
        for id in 0..4 {
            let sd = rd.join("sites").join(format!("site_{id}"));
            assert!(sd.join("personal.fmem").is_file());
            assert!(sd.join("data.fmds").is_file());
        }
        // The log parses back into the same records.
        let text = std::fs::read_to_string(rd.join("rounds.jsonl")).unwrap();
        let parsed: Vec<RoundRecord> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, art.records);

        // Attention export works from the artifacts alone.
        let out = export_attention(rd).unwrap();
        let attn = std::fs::read_to_string(out).unwrap();
        assert!(attn.lines().count() >= ATTN_SAMPLES * MODALITIES.len());
        for line in attn.lines().take(3) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(!v["attention"].as_array().unwrap().is_empty());
        }
    }

    #[test]
    fn no_lacca_run_skips_anchors_entirely() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg("nolacca", "no_lacca", dir.path());
        let mut fed = Federation::new(cfg).unwrap();
        fed.run_rounds().unwrap();
        assert!(!fed.bank().any_filled());
        for r in fed.records() {
            assert_eq!(r.anchor_drift_l2, 0.0);
        }
    }
}
