//! The encoder-decoder network: map encoder, token embedding composition,
//! relative-bias attention, and the five output heads.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::kinematics::MOTION_VOCAB_FULL;
use crate::map_codec::{MapSegment, FEATURE_DIM, MAX_POINTS};
use crate::math::{self, wrap_angle};
use crate::nn::{Matrix, Tape};

use crate::sequence::{
    group_causal_mask, knn_mask, knn_prune, relative_deltas, Anchor, AttentionMask, Payload,
    Target, Token, TokenGroup, TokenSequence, TYPE_VOCAB,
};
use crate::state_codec::{RS_BINS, RS_FIELDS};

/// Architecture and inference hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub rs_layers: usize,
    /// Hidden width of the relative-geometry bias MLP.
    pub d_rel: usize,
    pub d_ff: usize,
    pub max_agents: usize,
    pub max_lights: usize,
    pub max_map_segments: usize,
    pub knn_k: usize,
    pub nucleus_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 4,
            rs_layers: 2,
            d_rel: 32,
            d_ff: 256,
            max_agents: 128,
            max_lights: 32,
            max_map_segments: 3000,
            knn_k: 32,
            nucleus_p: 0.95,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for gradient checks and fast tests.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            rs_layers: 1,
            d_rel: 4,
            d_ff: 16,
            max_agents: 8,
            max_lights: 4,
            max_map_segments: 512,
            knn_k: 8,
            nucleus_p: 0.95,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(CoreError::Config(alloc::format!(
                "n_heads {} must divide d_model {}",
                self.n_heads,
                self.d_model
            )));
        }
        if self.dec_layers == 0 || self.enc_layers == 0 || self.rs_layers == 0 {
            return Err(CoreError::Config("layer counts must be positive".into()));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(CoreError::Config("nucleus_p must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Intra-step embedding table size (start + 4 per agent + end).
    pub fn intra_vocab(&self) -> usize {
        4 * self.max_agents + 2
    }
}

/// Decoder-side token groups that share an embedding id. The end token is
/// embedded as a speculative start-of-agent, so it reuses that group id.
fn group_embed_id(g: TokenGroup) -> usize {
    match g {
        TokenGroup::Tl => 0,
        TokenGroup::AsStart => 1,
        TokenGroup::AsSoa | TokenGroup::AsEnd => 2,
        TokenGroup::AsType => 3,
        TokenGroup::AsMs => 4,
        TokenGroup::AsRs => 5,
        TokenGroup::Mo => 6,
        TokenGroup::Map => unreachable!("map tokens are encoder-side"),
    }
}
const GROUP_VOCAB: usize = 7;

pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<Matrix>,
    names: Vec<String>,
    by_name: BTreeMap<String, usize>,
}

/// Per-head training statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeadStat {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl HeadStat {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    /// Summed cross-entropy over every supervised position.
    pub total: f64,
    pub targets: usize,
    pub tl: HeadStat,
    pub kind: HeadStat,
    pub map: HeadStat,
    pub rs: HeadStat,
    pub motion: HeadStat,
}

impl LossStats {
    pub fn min_accuracy(&self) -> f64 {
        let accs = [
            self.tl.accuracy(),
            self.kind.accuracy(),
            self.map.accuracy(),
            self.rs.accuracy(),
            self.motion.accuracy(),
        ];
        accs.iter().fold(1.0, |a: f64, &b| a.min(b))
    }
}

/// One forward pass; keeps the tape alive for head queries and backward.
pub struct ForwardOut {
    pub tape: Tape,
    /// Final decoder hidden states, (L, d).
    pub hidden: Id,
    /// Map memory, (M, d).
    pub memory: Id,
    pub loss: Option<Id>,
    pub stats: Option<LossStats>,
}

use crate::nn::Id;

struct AttnIds {
    wq: Id,
    wk: Id,
    wv: Id,
    wqp: Option<Id>,
    wo: Id,
    bo: Id,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, CoreError> {
        cfg.validate()?;
        let mut m = Model {
            cfg,
            params: Vec::new(),
            names: Vec::new(),
            by_name: BTreeMap::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let std = 0.02;
        let reg = |model: &mut Model, name: &str, mat: Matrix| {
            let idx = model.params.len();
            model.params.push(mat);
            model.names.push(String::from(name));
            model.by_name.insert(String::from(name), idx);
        };
        let randn = |r: usize, c: usize, rng: &mut ChaCha8Rng| Matrix::randn(r, c, std, rng);
        let ones = |c: usize| Matrix::from_fn(1, c, |_, _| 1.0);

        // embedding tables
        reg(&mut m, "emb_group", randn(GROUP_VOCAB, d, &mut rng));
        reg(&mut m, "emb_tl_state", randn(4, d, &mut rng));
        reg(&mut m, "emb_tl_id", randn(cfg.max_lights, d, &mut rng));
        reg(&mut m, "emb_map_id", randn(cfg.max_map_segments, d, &mut rng));
        reg(&mut m, "emb_intra", randn(cfg.intra_vocab(), d, &mut rng));
        reg(&mut m, "emb_aid", randn(cfg.max_agents + 1, d, &mut rng));
        reg(&mut m, "emb_soa", randn(1, d, &mut rng));
        reg(&mut m, "emb_type", randn(3, d, &mut rng));
        reg(&mut m, "emb_rs_bins", randn(RS_FIELDS * RS_BINS, d, &mut rng));
        reg(&mut m, "emb_motion", randn(MOTION_VOCAB_FULL, d, &mut rng));
        reg(&mut m, "emb_vel", randn(2, d, &mut rng));
        reg(&mut m, "emb_shape", randn(3, d, &mut rng));

        // map point encoder
        reg(&mut m, "map_in_w", randn(FEATURE_DIM, d, &mut rng));
        reg(&mut m, "map_in_b", Matrix::zeros(1, d));
        reg(&mut m, "map_mid_w", randn(d, d, &mut rng));
        reg(&mut m, "map_mid_b", Matrix::zeros(1, d));

        // shared relative-bias MLPs (one per attention site kind)
        for site in ["enc", "dec", "crs"] {
            reg(&mut m, &alloc::format!("{site}_rel_w1"), randn(4, cfg.d_rel, &mut rng));
            reg(&mut m, &alloc::format!("{site}_rel_b1"), Matrix::zeros(1, cfg.d_rel));
            reg(&mut m, &alloc::format!("{site}_rel_w2"), randn(cfg.d_rel, d, &mut rng));
        }

        let attn = |model: &mut Model, prefix: &str, with_bias: bool, rng: &mut ChaCha8Rng| {
            for w in ["wq", "wk", "wv", "wo"] {
                let idx = model.params.len();
                model.params.push(Matrix::randn(d, d, std, rng));
                model.names.push(alloc::format!("{prefix}.{w}"));
                model.by_name.insert(alloc::format!("{prefix}.{w}"), idx);
            }
            if with_bias {
                let idx = model.params.len();
                model.params.push(Matrix::randn(d, d, std, rng));
                model.names.push(alloc::format!("{prefix}.wqp"));
                model.by_name.insert(alloc::format!("{prefix}.wqp"), idx);
            }
            let idx = model.params.len();
            model.params.push(Matrix::zeros(1, d));
            model.names.push(alloc::format!("{prefix}.bo"));
            model.by_name.insert(alloc::format!("{prefix}.bo"), idx);
        };

        for l in 0..cfg.enc_layers {
            let p = alloc::format!("enc.l{l}");
            reg(&mut m, &alloc::format!("{p}.ln1_g"), ones(d));
            reg(&mut m, &alloc::format!("{p}.ln1_b"), Matrix::zeros(1, d));
            attn(&mut m, &alloc::format!("{p}.sa"), true, &mut rng);
            reg(&mut m, &alloc::format!("{p}.ln2_g"), ones(d));
            reg(&mut m, &alloc::format!("{p}.ln2_b"), Matrix::zeros(1, d));
            reg(&mut m, &alloc::format!("{p}.ff_w1"), randn(d, cfg.d_ff, &mut rng));
            reg(&mut m, &alloc::format!("{p}.ff_b1"), Matrix::zeros(1, cfg.d_ff));
            reg(&mut m, &alloc::format!("{p}.ff_w2"), randn(cfg.d_ff, d, &mut rng));
            reg(&mut m, &alloc::format!("{p}.ff_b2"), Matrix::zeros(1, d));
        }
        reg(&mut m, "enc.lnf_g", ones(d));
        reg(&mut m, "enc.lnf_b", Matrix::zeros(1, d));

        for l in 0..cfg.dec_layers {
            let p = alloc::format!("dec.l{l}");
            reg(&mut m, &alloc::format!("{p}.ln1_g"), ones(d));
            reg(&mut m, &alloc::format!("{p}.ln1_b"), Matrix::zeros(1, d));
            attn(&mut m, &alloc::format!("{p}.sa"), true, &mut rng);
            reg(&mut m, &alloc::format!("{p}.lnx_g"), ones(d));
            reg(&mut m, &alloc::format!("{p}.lnx_b"), Matrix::zeros(1, d));
            attn(&mut m, &alloc::format!("{p}.ca"), true, &mut rng);
            reg(&mut m, &alloc::format!("{p}.ln2_g"), ones(d));
            reg(&mut m, &alloc::format!("{p}.ln2_b"), Matrix::zeros(1, d));
            reg(&mut m, &alloc::format!("{p}.ff_w1"), randn(d, cfg.d_ff, &mut rng));
            reg(&mut m, &alloc::format!("{p}.ff_b1"), Matrix::zeros(1, cfg.d_ff));
            reg(&mut m, &alloc::format!("{p}.ff_w2"), randn(cfg.d_ff, d, &mut rng));
            reg(&mut m, &alloc::format!("{p}.ff_b2"), Matrix::zeros(1, d));
        }
        reg(&mut m, "dec.lnf_g", ones(d));
        reg(&mut m, "dec.lnf_b", Matrix::zeros(1, d));

        // heads
        reg(&mut m, "head_tl_w", randn(d, 4, &mut rng));
        reg(&mut m, "head_tl_b", Matrix::zeros(1, 4));
        reg(&mut m, "head_type_w", randn(d, TYPE_VOCAB, &mut rng));
        reg(&mut m, "head_type_b", Matrix::zeros(1, TYPE_VOCAB));
        reg(&mut m, "head_map_q", randn(d, d, &mut rng));
        reg(&mut m, "head_mo_w", randn(d, MOTION_VOCAB_FULL, &mut rng));
        reg(&mut m, "head_mo_b", Matrix::zeros(1, MOTION_VOCAB_FULL));

        // relative-state head: tiny causal transformer conditioned via
        // adaptive layer norm
        reg(&mut m, "rs_sos", randn(1, d, &mut rng));
        reg(&mut m, "rs_pos", randn(RS_FIELDS + 1, d, &mut rng));
        for l in 0..cfg.rs_layers {
            let p = alloc::format!("rs.l{l}");
            attn(&mut m, &alloc::format!("{p}.sa"), false, &mut rng);
            reg(&mut m, &alloc::format!("{p}.ada1_ws"), Matrix::zeros(d, d));
            reg(&mut m, &alloc::format!("{p}.ada1_wb"), Matrix::zeros(d, d));
            reg(&mut m, &alloc::format!("{p}.ada2_ws"), Matrix::zeros(d, d));
            reg(&mut m, &alloc::format!("{p}.ada2_wb"), Matrix::zeros(d, d));
            reg(&mut m, &alloc::format!("{p}.ff_w1"), randn(d, cfg.d_ff, &mut rng));
            reg(&mut m, &alloc::format!("{p}.ff_b1"), Matrix::zeros(1, cfg.d_ff));
            reg(&mut m, &alloc::format!("{p}.ff_w2"), randn(cfg.d_ff, d, &mut rng));
            reg(&mut m, &alloc::format!("{p}.ff_b2"), Matrix::zeros(1, d));
        }
        reg(&mut m, "rs_adaf_ws", Matrix::zeros(d, d));
        reg(&mut m, "rs_adaf_wb", Matrix::zeros(d, d));
        reg(&mut m, "rs_out_w", randn(d, RS_BINS, &mut rng));
        reg(&mut m, "rs_out_b", Matrix::zeros(1, RS_BINS));

        Ok(m)
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(|p| (p.rows, p.cols)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Id {
        let i = self.index_of(name);
        tape.param(self.params[i].clone(), i)
    }

    fn attn_ids(&self, tape: &mut Tape, prefix: &str, with_bias: bool) -> AttnIds {
        AttnIds {
            wq: self.p(tape, &alloc::format!("{prefix}.wq")),
            wk: self.p(tape, &alloc::format!("{prefix}.wk")),
            wv: self.p(tape, &alloc::format!("{prefix}.wv")),
            wqp: if with_bias {
                Some(self.p(tape, &alloc::format!("{prefix}.wqp")))
            } else {
                None
            },
            wo: self.p(tape, &alloc::format!("{prefix}.wo")),
            bo: self.p(tape, &alloc::format!("{prefix}.bo")),
        }
    }

    fn mha(
        &self,
        tape: &mut Tape,
        q_in: Id,
        kv_in: Id,
        ids: &AttnIds,
        mask: &AttentionMask,
        rel: Option<(Id, &[(usize, usize)])>,
    ) -> Id {
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = d / nh;
        let n_k = tape.shape(kv_in).0;
        let q = tape.matmul(q_in, ids.wq);
        let k = tape.matmul(kv_in, ids.wk);
        let v = tape.matmul(kv_in, ids.wv);
        let qp = match (ids.wqp, rel) {
            (Some(wqp), Some(_)) => Some(tape.matmul(q_in, wqp)),
            _ => None,
        };
        let flat = mask.to_flat();
        let mut out: Option<Id> = None;
        for h in 0..nh {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let mut scores = tape.matmul_nt(qh, kh);
            if let (Some(qp), Some((rel_id, pairs))) = (qp, rel) {
                let qph = tape.slice_cols(qp, h * dh, dh);
                let relh = tape.slice_cols(rel_id, h * dh, dh);
                let pb = tape.pair_dot_scatter(qph, relh, pairs.to_vec(), n_k);
                scores = tape.add(scores, pb);
            }
            let scores = tape.scale(scores, 1.0 / math::sqrt(dh as f64));
            let probs = tape.softmax_masked(scores, flat.clone());
            let oh = tape.matmul(probs, vh);
            let wo_h = tape.gather_rows(ids.wo, (h * dh..(h + 1) * dh).collect());
            let contrib = tape.matmul(oh, wo_h);
            out = Some(match out {
                Some(acc) => tape.add(acc, contrib),
                None => contrib,
            });
        }
        let out = out.unwrap();
        tape.add_row(out, ids.bo)
    }

    fn rel_bias(&self, tape: &mut Tape, site: &str, deltas: &[[f64; 4]]) -> Id {
        let x = tape.constant(Matrix::from_fn(deltas.len(), 4, |r, c| deltas[r][c]));
        let w1 = self.p(tape, &alloc::format!("{site}_rel_w1"));
        let b1 = self.p(tape, &alloc::format!("{site}_rel_b1"));
        let w2 = self.p(tape, &alloc::format!("{site}_rel_w2"));
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        tape.matmul(h, w2)
    }

    fn ln(&self, tape: &mut Tape, x: Id, prefix: &str) -> Id {
        let g = self.p(tape, &alloc::format!("{prefix}_g"));
        let b = self.p(tape, &alloc::format!("{prefix}_b"));
        tape.layer_norm(x, g, b, 1e-5)
    }

    fn ff(&self, tape: &mut Tape, x: Id, prefix: &str) -> Id {
        let w1 = self.p(tape, &alloc::format!("{prefix}.ff_w1"));
        let b1 = self.p(tape, &alloc::format!("{prefix}.ff_b1"));
        let w2 = self.p(tape, &alloc::format!("{prefix}.ff_w2"));
        let b2 = self.p(tape, &alloc::format!("{prefix}.ff_b2"));
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2);
        tape.add_row(h, b2)
    }

    /// Encode map segments into the (M, d) memory.
    fn encode_map(&self, tape: &mut Tape, segments: &[MapSegment]) -> Result<Id, CoreError> {
        if segments.is_empty() {
            return Err(CoreError::Map("cannot encode an empty map".into()));
        }
        if segments.len() > self.cfg.max_map_segments {
            return Err(CoreError::Consistency(alloc::format!(
                "{} segments exceed the model budget {}",
                segments.len(),
                self.cfg.max_map_segments
            )));
        }
        let m = segments.len();
        let mut feats = Vec::with_capacity(m * MAX_POINTS * FEATURE_DIM);
        let mut counts = Vec::with_capacity(m);
        let mut valid_col = Vec::with_capacity(m * MAX_POINTS);
        for seg in segments {
            let local = segment_local_features(seg);
            counts.push(seg.records.len().max(1) as f64);
            for row in &local {
                feats.extend_from_slice(row);
                valid_col.push(row[FEATURE_DIM - 1]);
            }
        }
        let x = tape.constant(Matrix::from_vec(m * MAX_POINTS, FEATURE_DIM, feats));
        let w_in = self.p(tape, "map_in_w");
        let b_in = self.p(tape, "map_in_b");
        let w_mid = self.p(tape, "map_mid_w");
        let b_mid = self.p(tape, "map_mid_b");
        let h = tape.matmul(x, w_in);
        let h = tape.add_row(h, b_in);
        let h = tape.gelu(h);
        let h = tape.matmul(h, w_mid);
        let h = tape.add_row(h, b_mid);
        let h = tape.gelu(h);
        let vcol = tape.constant(Matrix::from_vec(m * MAX_POINTS, 1, valid_col));
        let h = tape.mul_col(h, vcol);
        // mean-pool valid point rows per segment
        let mut pooled = Vec::with_capacity(m);
        for i in 0..m {
            let rows = tape.gather_rows(h, (i * MAX_POINTS..(i + 1) * MAX_POINTS).collect());
            pooled.push(tape.sum_rows(rows));
        }
        let pooled = tape.concat_rows(pooled);
        let inv = tape.constant(Matrix::from_vec(m, 1, counts.iter().map(|&c| 1.0 / c).collect()));
        let mut x = tape.mul_col(pooled, inv);

        // encoder self-attention over segments
        let anchors: Vec<Option<Anchor>> = segments.iter().map(segment_anchor).collect();
        let mut mask = AttentionMask::new(m, m, true);
        knn_prune(&anchors, &anchors, &mut mask, self.cfg.knn_k);
        let (pairs, deltas) = collect_pairs(&mask, &anchors, &anchors, false);
        let rel = self.rel_bias(tape, "enc", &deltas);
        for l in 0..self.cfg.enc_layers {
            let p = alloc::format!("enc.l{l}");
            let xn = self.ln(tape, x, &alloc::format!("{p}.ln1"));
            let ids = self.attn_ids(tape, &alloc::format!("{p}.sa"), true);
            let a = self.mha(tape, xn, xn, &ids, &mask, Some((rel, &pairs)));
            x = tape.add(x, a);
            let xn = self.ln(tape, x, &alloc::format!("{p}.ln2"));
            let f = self.ff(tape, xn, &p);
            x = tape.add(x, f);
        }
        Ok(self.ln(tape, x, "enc.lnf"))
    }

    /// Compose the (L, d) input embedding matrix for a token stream.
    fn embed_tokens(&self, tape: &mut Tape, tokens: &[Token]) -> Result<Id, CoreError> {
        let cfg = &self.cfg;
        let l = tokens.len();
        if l == 0 {
            return Err(CoreError::Validation("empty token stream".into()));
        }
        // per-table index + usage-indicator accumulation
        struct Acc {
            idx: Vec<usize>,
            used: Vec<f64>,
        }
        let mut accs: BTreeMap<&'static str, Acc> = BTreeMap::new();
        let mut mark = |table: &'static str, pos: usize, idx: usize| {
            let a = accs.entry(table).or_insert_with(|| Acc {
                idx: alloc::vec![0; l],
                used: alloc::vec![0.0; l],
            });
            a.idx[pos] = idx;
            a.used[pos] += 1.0;
        };
        let mut vel_rows = alloc::vec![0.0; l * 2];
        let mut shape_rows = alloc::vec![0.0; l * 3];
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(CoreError::Consistency(alloc::format!("{what} out of embedding range")))
            }
        };
        for (pos, tok) in tokens.iter().enumerate() {
            mark("emb_group", pos, group_embed_id(tok.group));
            if let Some(intra) = tok.intra {
                check(intra < cfg.intra_vocab(), "intra index")?;
                mark("emb_intra", pos, intra);
            }
            match &tok.payload {
                Payload::Tl { tl_id, state, map_id } => {
                    check((*tl_id as usize) < cfg.max_lights, "traffic light id")?;
                    check(*map_id < cfg.max_map_segments, "map id")?;
                    mark("emb_tl_state", pos, state.index());
                    mark("emb_tl_id", pos, *tl_id as usize);
                    mark("emb_map_id", pos, *map_id);
                }
                Payload::AsStart => {}
                Payload::Soa { aid } | Payload::AsEnd { aid } => {
                    let aid = (*aid as usize).min(cfg.max_agents);
                    mark("emb_aid", pos, aid);
                    mark("emb_soa", pos, 0);
                }
                Payload::TypeTok { aid, kind } => {
                    check((*aid as usize) < cfg.max_agents, "agent id")?;
                    mark("emb_aid", pos, *aid as usize);
                    mark("emb_type", pos, kind.index());
                }
                Payload::Ms { aid, kind, map_id } => {
                    check((*aid as usize) < cfg.max_agents, "agent id")?;
                    check(*map_id < cfg.max_map_segments, "map id")?;
                    mark("emb_aid", pos, *aid as usize);
                    mark("emb_type", pos, kind.index());
                    mark("emb_map_id", pos, *map_id);
                }
                Payload::Rs { aid, kind, map_id, bins: _ } => {
                    check((*aid as usize) < cfg.max_agents, "agent id")?;
                    check(*map_id < cfg.max_map_segments, "map id")?;
                    mark("emb_aid", pos, *aid as usize);
                    mark("emb_type", pos, kind.index());
                    mark("emb_map_id", pos, *map_id);
                    // the 8 field embeddings are summed through repeated
                    // gathers below
                }
                Payload::Mo { aid, kind, label, vel, shape } => {
                    check((*aid as usize) < cfg.max_agents, "agent id")?;
                    check(label.0 < MOTION_VOCAB_FULL, "motion label")?;
                    mark("emb_aid", pos, *aid as usize);
                    mark("emb_type", pos, kind.index());
                    mark("emb_motion", pos, label.0);
                    vel_rows[pos * 2] = vel.0;
                    vel_rows[pos * 2 + 1] = vel.1;
                    shape_rows[pos * 3] = shape[0];
                    shape_rows[pos * 3 + 1] = shape[1];
                    shape_rows[pos * 3 + 2] = shape[2];
                }
            }
        }

        let mut total: Option<Id> = None;
        let add_contrib = |tape: &mut Tape, total: &mut Option<Id>, c: Id| {
            *total = Some(match *total {
                Some(t) => tape.add(t, c),
                None => c,
            });
        };
        for (table, acc) in &accs {
            let tab = self.p(tape, table);
            let g = tape.gather_rows(tab, acc.idx.clone());
            let u = tape.constant(Matrix::from_vec(l, 1, acc.used.clone()));
            let c = tape.mul_col(g, u);
            add_contrib(tape, &mut total, c);
        }
        // relative-state bin embeddings: one gather per field
        let rs_tab = self.p(tape, "emb_rs_bins");
        for f in 0..RS_FIELDS {
            let mut idx = alloc::vec![0; l];
            let mut used = alloc::vec![0.0; l];
            let mut any = false;
            for (pos, tok) in tokens.iter().enumerate() {
                if let Payload::Rs { bins, .. } = &tok.payload {
                    idx[pos] = f * RS_BINS + bins[f];
                    used[pos] = 1.0;
                    any = true;
                }
            }
            if !any {
                break;
            }
            let g = tape.gather_rows(rs_tab, idx);
            let u = tape.constant(Matrix::from_vec(l, 1, used));
            let c = tape.mul_col(g, u);
            add_contrib(tape, &mut total, c);
        }
        // continuous projections for motion tokens
        let vel = tape.constant(Matrix::from_vec(l, 2, vel_rows));
        let wv = self.p(tape, "emb_vel");
        let c = tape.matmul(vel, wv);
        add_contrib(tape, &mut total, c);
        let shp = tape.constant(Matrix::from_vec(l, 3, shape_rows));
        let ws = self.p(tape, "emb_shape");
        let c = tape.matmul(shp, ws);
        add_contrib(tape, &mut total, c);
        Ok(total.unwrap())
    }

    /// Full encoder-decoder pass. With `compute_loss`, builds the summed
    /// cross-entropy over every supervised token and teacher-forced accuracy
    /// counts per head.
    pub fn forward(
        &self,
        seq: &TokenSequence,
        segments: &[MapSegment],
        compute_loss: bool,
    ) -> Result<ForwardOut, CoreError> {
        let mut tape = Tape::new();
        let memory = self.encode_map(&mut tape, segments)?;
        let tokens = &seq.tokens;
        let l = tokens.len();
        let mut x = self.embed_tokens(&mut tape, tokens)?;

        // masks and relative geometry, shared across layers
        let base = group_causal_mask(seq);
        let self_mask = knn_mask(seq, &base, self.cfg.knn_k);
        let tok_anchors: Vec<Option<Anchor>> = tokens.iter().map(|t| t.anchor).collect();
        let seg_anchors: Vec<Option<Anchor>> = segments.iter().map(segment_anchor).collect();
        let mut cross_mask = AttentionMask::new(l, segments.len(), true);
        knn_prune(&tok_anchors, &seg_anchors, &mut cross_mask, self.cfg.knn_k);
        let (self_pairs, self_deltas) = collect_pairs(&self_mask, &tok_anchors, &tok_anchors, false);
        let (cross_pairs, cross_deltas) =
            collect_pairs(&cross_mask, &tok_anchors, &seg_anchors, true);
        let self_rel = self.rel_bias(&mut tape, "dec", &self_deltas);
        let cross_rel = self.rel_bias(&mut tape, "crs", &cross_deltas);

        for li in 0..self.cfg.dec_layers {
            let p = alloc::format!("dec.l{li}");
            let xn = self.ln(&mut tape, x, &alloc::format!("{p}.ln1"));
            let ids = self.attn_ids(&mut tape, &alloc::format!("{p}.sa"), true);
            let a = self.mha(&mut tape, xn, xn, &ids, &self_mask, Some((self_rel, &self_pairs)));
            x = tape.add(x, a);
            let xn = self.ln(&mut tape, x, &alloc::format!("{p}.lnx"));
            let ids = self.attn_ids(&mut tape, &alloc::format!("{p}.ca"), true);
            let a = self.mha(&mut tape, xn, memory, &ids, &cross_mask, Some((cross_rel, &cross_pairs)));
            x = tape.add(x, a);
            let xn = self.ln(&mut tape, x, &alloc::format!("{p}.ln2"));
            let f = self.ff(&mut tape, xn, &p);
            x = tape.add(x, f);
        }
        let hidden = self.ln(&mut tape, x, "dec.lnf");

        let mut out = ForwardOut {
            tape,
            hidden,
            memory,
            loss: None,
            stats: None,
        };
        if compute_loss {
            self.build_loss(&mut out, tokens, segments.len())?;
        }
        Ok(out)
    }

    fn head_linear(&self, tape: &mut Tape, rows_id: Id, w: &str, b: &str) -> Id {
        let w = self.p(tape, w);
        let b = self.p(tape, b);
        let h = tape.matmul(rows_id, w);
        tape.add_row(h, b)
    }

    fn build_loss(&self, out: &mut ForwardOut, tokens: &[Token], n_segments: usize) -> Result<(), CoreError> {
        let tape = &mut out.tape;
        let mut losses: Vec<Id> = Vec::new();
        let mut stats = LossStats::default();

        let rows_for = |sel: fn(&Target) -> Option<usize>| {
            let mut rows = Vec::new();
            let mut classes = Vec::new();
            for (pos, tok) in tokens.iter().enumerate() {
                if let Some(t) = &tok.target {
                    if let Some(c) = sel(t) {
                        rows.push(pos);
                        classes.push(c);
                    }
                }
            }
            (rows, classes)
        };

        // TL state head
        let (rows, classes) = rows_for(|t| match t {
            Target::TlNext(c) => Some(*c),
            _ => None,
        });
        if !rows.is_empty() {
            let h = tape.gather_rows(out.hidden, rows);
            let logits = self.head_linear(tape, h, "head_tl_w", "head_tl_b");
            stats.tl = tally(tape, logits, &classes);
            let ce = tape.cross_entropy(logits, classes.iter().copied().enumerate().collect());
            losses.push(ce);
        }

        // type / end head
        let (rows, classes) = rows_for(|t| match t {
            Target::TypeOrEnd(c) => Some(*c),
            _ => None,
        });
        if !rows.is_empty() {
            let h = tape.gather_rows(out.hidden, rows);
            let logits = self.head_linear(tape, h, "head_type_w", "head_type_b");
            stats.kind = tally(tape, logits, &classes);
            let ce = tape.cross_entropy(logits, classes.iter().copied().enumerate().collect());
            losses.push(ce);
        }

        // map-id head: tied dot product against memory + id embedding
        let (rows, classes) = rows_for(|t| match t {
            Target::MapId(c) => Some(*c),
            _ => None,
        });
        if !rows.is_empty() {
            if classes.iter().any(|&c| c >= n_segments) {
                return Err(CoreError::Consistency("map-id target out of range".into()));
            }
            let h = tape.gather_rows(out.hidden, rows);
            let wq = self.p(tape, "head_map_q");
            let q = tape.matmul(h, wq);
            let keys = self.map_keys(tape, out.memory, n_segments);
            let logits = tape.matmul_nt(q, keys);
            stats.map = tally(tape, logits, &classes);
            let ce = tape.cross_entropy(logits, classes.iter().copied().enumerate().collect());
            losses.push(ce);
        }

        // motion head
        let (rows, classes) = rows_for(|t| match t {
            Target::Motion(c) => Some(*c),
            _ => None,
        });
        if !rows.is_empty() {
            let h = tape.gather_rows(out.hidden, rows);
            let logits = self.head_linear(tape, h, "head_mo_w", "head_mo_b");
            stats.motion = tally(tape, logits, &classes);
            let ce = tape.cross_entropy(logits, classes.iter().copied().enumerate().collect());
            losses.push(ce);
        }

        // relative-state head, one tiny conditioned stack per supervised token
        for (pos, tok) in tokens.iter().enumerate() {
            if let Some(Target::RsBins(bins)) = &tok.target {
                let cond = tape.gather_rows(out.hidden, alloc::vec![pos]);
                let logits = self.rs_stack(tape, cond, bins, RS_FIELDS);
                let targets: Vec<(usize, usize)> =
                    bins.iter().copied().enumerate().collect();
                for (row, &cls) in bins.iter().enumerate() {
                    let lr = tape.value(logits).row(row);
                    if crate::nn::argmax(lr) == cls {
                        stats.rs.correct += 1;
                    }
                    stats.rs.total += 1;
                }
                let ce = tape.cross_entropy(logits, targets);
                stats.rs.loss += tape.value(ce).scalar();
                losses.push(ce);
            }
        }

        if losses.is_empty() {
            return Err(CoreError::Validation("sequence has no supervised targets".into()));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l);
        }
        stats.total = tape.value(total).scalar();
        stats.targets =
            stats.tl.total + stats.kind.total + stats.map.total + stats.motion.total + stats.rs.total;
        out.loss = Some(total);
        out.stats = Some(stats);
        Ok(())
    }

    fn map_keys(&self, tape: &mut Tape, memory: Id, n_segments: usize) -> Id {
        let tab = self.p(tape, "emb_map_id");
        let ids = tape.gather_rows(tab, (0..n_segments).collect());
        tape.add(memory, ids)
    }

    /// The conditioned relative-state stack. Feeds SOS plus the first
    /// `n_out.min(8)` supervised bins and returns `(n_out, RS_BINS)` logits,
    /// where row `i` predicts field `i`.
    fn rs_stack(&self, tape: &mut Tape, cond: Id, bins: &[usize; RS_FIELDS], n_out: usize) -> Id {
        debug_assert!(n_out >= 1 && n_out <= RS_FIELDS);
        let d = self.cfg.d_model;
        let n = n_out; // rows: SOS then bins[0..n_out-1]
        let sos = self.p(tape, "rs_sos");
        let mut rows = alloc::vec![sos];
        if n > 1 {
            let tab = self.p(tape, "emb_rs_bins");
            let idx: Vec<usize> = (0..n - 1).map(|f| f * RS_BINS + bins[f]).collect();
            rows.push(tape.gather_rows(tab, idx));
        }
        let x0 = tape.concat_rows(rows);
        let pos_tab = self.p(tape, "rs_pos");
        let pos = tape.gather_rows(pos_tab, (0..n).collect());
        let mut x = tape.add(x0, pos);
        let mut mask = AttentionMask::new(n, n, false);
        for q in 0..n {
            for k in 0..=q {
                mask.set(q, k, true);
            }
        }
        let ones = tape.constant(Matrix::from_fn(1, d, |_, _| 1.0));
        let zeros = tape.constant(Matrix::zeros(1, d));
        let ada = |tape: &mut Tape, x: Id, cond: Id, ws: &str, wb: &str, slf: &Model| {
            let xh = tape.layer_norm(x, ones, zeros, 1e-5);
            let ws = slf.p(tape, ws);
            let wb = slf.p(tape, wb);
            let s = tape.matmul(cond, ws);
            let b = tape.matmul(cond, wb);
            let scaled = tape.mul_row(xh, s);
            let y = tape.add(xh, scaled);
            tape.add_row(y, b)
        };
        for l in 0..self.cfg.rs_layers {
            let p = alloc::format!("rs.l{l}");
            let xn = ada(tape, x, cond, &alloc::format!("{p}.ada1_ws"), &alloc::format!("{p}.ada1_wb"), self);
            let ids = self.attn_ids(tape, &alloc::format!("{p}.sa"), false);
            let a = self.mha(tape, xn, xn, &ids, &mask, None);
            x = tape.add(x, a);
            let xn = ada(tape, x, cond, &alloc::format!("{p}.ada2_ws"), &alloc::format!("{p}.ada2_wb"), self);
            let f = self.ff(tape, xn, &p);
            x = tape.add(x, f);
        }
        let xn = ada(tape, x, cond, "rs_adaf_ws", "rs_adaf_wb", self);
        self.head_linear(tape, xn, "rs_out_w", "rs_out_b")
    }

    // inference-side head queries on a finished forward pass

    pub fn tl_logits(&self, out: &mut ForwardOut, pos: usize) -> Vec<f64> {
        let h = out.tape.gather_rows(out.hidden, alloc::vec![pos]);
        let id = self.head_linear(&mut out.tape, h, "head_tl_w", "head_tl_b");
        out.tape.value(id).row(0).to_vec()
    }

    pub fn type_logits(&self, out: &mut ForwardOut, pos: usize) -> Vec<f64> {
        let h = out.tape.gather_rows(out.hidden, alloc::vec![pos]);
        let id = self.head_linear(&mut out.tape, h, "head_type_w", "head_type_b");
        out.tape.value(id).row(0).to_vec()
    }

    pub fn map_logits(&self, out: &mut ForwardOut, pos: usize, n_segments: usize) -> Vec<f64> {
        let h = out.tape.gather_rows(out.hidden, alloc::vec![pos]);
        let wq = self.p(&mut out.tape, "head_map_q");
        let q = out.tape.matmul(h, wq);
        let keys = self.map_keys(&mut out.tape, out.memory, n_segments);
        let id = out.tape.matmul_nt(q, keys);
        out.tape.value(id).row(0).to_vec()
    }

    pub fn motion_logits(&self, out: &mut ForwardOut, pos: usize) -> Vec<f64> {
        let h = out.tape.gather_rows(out.hidden, alloc::vec![pos]);
        let id = self.head_linear(&mut out.tape, h, "head_mo_w", "head_mo_b");
        out.tape.value(id).row(0).to_vec()
    }

    /// Logits for relative-state field `prefix.len()` given the already
    /// sampled bins.
    pub fn rs_next_logits(&self, out: &mut ForwardOut, pos: usize, prefix: &[usize]) -> Vec<f64> {
        debug_assert!(prefix.len() < RS_FIELDS);
        let mut bins = [0usize; RS_FIELDS];
        bins[..prefix.len()].copy_from_slice(prefix);
        let cond = out.tape.gather_rows(out.hidden, alloc::vec![pos]);
        let logits = self.rs_stack(&mut out.tape, cond, &bins, prefix.len() + 1);
        out.tape.value(logits).row(prefix.len()).to_vec()
    }

    /// Backward pass + parameter gradient collection for a loss-bearing
    /// forward.
    pub fn grads(&self, out: &mut ForwardOut) -> Result<Vec<Matrix>, CoreError> {
        let loss = out
            .loss
            .ok_or_else(|| CoreError::Validation("forward pass carries no loss".into()))?;
        out.tape.backward(loss);
        let mut grads: Vec<Matrix> = self
            .params
            .iter()
            .map(|p| Matrix::zeros(p.rows, p.cols))
            .collect();
        out.tape.collect_param_grads(&mut grads);
        Ok(grads)
    }
}

fn tally(tape: &Tape, logits: Id, classes: &[usize]) -> HeadStat {
    let mut stat = HeadStat::default();
    let v = tape.value(logits);
    for (row, &cls) in classes.iter().enumerate() {
        if crate::nn::argmax(v.row(row)) == cls {
            stat.correct += 1;
        }
        stat.total += 1;
    }
    stat
}

fn segment_anchor(seg: &MapSegment) -> Option<Anchor> {
    Some(Anchor {
        x: seg.center.0,
        y: seg.center.1,
        psi: seg.heading,
        t: 0,
    })
}

/// Allowed anchored pairs of a mask plus their geometric deltas.
/// With `timeless_keys`, the step difference is forced to zero (map keys).
fn collect_pairs(
    mask: &AttentionMask,
    q_anchors: &[Option<Anchor>],
    k_anchors: &[Option<Anchor>],
    timeless_keys: bool,
) -> (Vec<(usize, usize)>, Vec<[f64; 4]>) {
    let mut pairs = Vec::new();
    let mut deltas = Vec::new();
    for q in 0..mask.n_q {
        if q_anchors[q].is_none() {
            continue;
        }
        for k in 0..mask.n_k {
            if !mask.get(q, k) {
                continue;
            }
            if k_anchors[k].is_none() {
                continue;
            }
            let (dx, dy, dpsi, dt, ok) =
                relative_deltas(q_anchors[q].as_ref(), k_anchors[k].as_ref());
            debug_assert!(ok);
            pairs.push((q, k));
            deltas.push([dx, dy, dpsi, if timeless_keys { 0.0 } else { dt }]);
        }
    }
    (pairs, deltas)
}

/// Per-point features of a segment expressed in the segment's own frame
/// (center at the origin, heading along +x). Global placement reaches the
/// network only through relative attention.
pub fn segment_local_features(seg: &MapSegment) -> Vec<[f64; FEATURE_DIM]> {
    let mut rows = Vec::with_capacity(MAX_POINTS);
    let (cx, cy) = seg.center;
    let phi = seg.heading;
    for rec in seg.records.iter().take(MAX_POINTS) {
        let mut f = [0.0; FEATURE_DIM];
        let (sx, sy) = math::rotate(rec.start[0] - cx, rec.start[1] - cy, -phi);
        let (ex, ey) = math::rotate(rec.end[0] - cx, rec.end[1] - cy, -phi);
        f[0] = sx;
        f[1] = sy;
        f[2] = rec.start[2];
        f[3] = ex;
        f[4] = ey;
        f[5] = rec.end[2];
        let len = rec.length();
        if len > 0.0 {
            f[6] = (ex - sx) / len;
            f[7] = (ey - sy) / len;
            f[8] = (rec.end[2] - rec.start[2]) / len;
        }
        let local_heading = wrap_angle(rec.heading() - phi);
        f[9] = local_heading;
        f[10] = math::sin(local_heading);
        f[11] = math::cos(local_heading);
        f[12] = len;
        f[13 + seg.semantic_type.index()] = 1.0;
        f[25] = seg.total_length;
        f[26] = 1.0;
        rows.push(f);
    }
    while rows.len() < MAX_POINTS {
        rows.push([0.0; FEATURE_DIM]);
    }
    rows
}
