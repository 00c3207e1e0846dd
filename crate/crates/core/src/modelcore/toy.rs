//! Toy encoder-decoder over a whitespace vocabulary.
//!
//! Encoder: token + position embeddings, a per-token tanh layer, then a
//! second tanh layer mixing each token with the sequence mean. Decoder: a
//! tanh recurrent cell with dot-product attention over the encoder states,
//! followed by a tanh output layer and a vocabulary projection. Token
//! embeddings are shared between encoder and decoder inputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{log_sum_exp, Graph, Loss, NodeId};
use super::params::{ParamId, ParameterStore, Tensor};
use super::vocab::{Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
use super::{GenerationConfig, ModelError, TextToTextModel};

pub const BACKEND_ID: &str = "toy-seq2seq";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub d_model: usize,
    pub max_source_tokens: usize,
    pub max_target_tokens: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            max_source_tokens: 64,
            max_target_tokens: 48,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    embed: ParamId,
    pos_enc: ParamId,
    pos_dec: ParamId,
    enc1_w: ParamId,
    enc1_b: ParamId,
    enc2_w: ParamId,
    enc2_mix: ParamId,
    enc2_b: ParamId,
    init_w: ParamId,
    init_b: ParamId,
    query_w: ParamId,
    rec_w: ParamId,
    in_w: ParamId,
    ctx_w: ParamId,
    rec_b: ParamId,
    out_state_w: ParamId,
    out_ctx_w: ParamId,
    out_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ToySeq2Seq {
    config: ToyConfig,
    vocab: Vocabulary,
    params: ParameterStore,
    ids: Ids,
}

/// Parameter leaves for one graph.
struct Leaves {
    embed: NodeId,
    pos_enc: NodeId,
    pos_dec: NodeId,
    enc1_w: NodeId,
    enc1_b: NodeId,
    enc2_w: NodeId,
    enc2_mix: NodeId,
    enc2_b: NodeId,
    init_w: NodeId,
    init_b: NodeId,
    query_w: NodeId,
    rec_w: NodeId,
    in_w: NodeId,
    ctx_w: NodeId,
    rec_b: NodeId,
    out_state_w: NodeId,
    out_ctx_w: NodeId,
    out_b: NodeId,
    proj_w: NodeId,
    proj_b: NodeId,
}

struct Encoded {
    states: Vec<NodeId>,
    init: NodeId,
}

impl ToySeq2Seq {
    pub fn new(config: ToyConfig, vocab: Vocabulary) -> Self {
        let d = config.d_model;
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterStore::new();
        let mut mat = |name: &str, rows: usize, cols: usize, fan_in: usize| {
            let bound = config.init_scale * (3.0 / fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(name, Tensor::new(vec![rows, cols], data))
        };
        let embed = mat("embed", v, d, 1);
        let pos_enc = mat("pos_enc", config.max_source_tokens, d, 4);
        let pos_dec = mat("pos_dec", config.max_target_tokens + 1, d, 4);
        let enc1_w = mat("enc1.w", d, d, d);
        let enc2_w = mat("enc2.w", d, d, d);
        let enc2_mix = mat("enc2.mix", d, d, d);
        let init_w = mat("dec.init.w", d, d, d);
        let query_w = mat("dec.query.w", d, d, d);
        let rec_w = mat("dec.rec.w", d, d, d);
        let in_w = mat("dec.in.w", d, d, d);
        let ctx_w = mat("dec.ctx.w", d, d, d);
        let out_state_w = mat("dec.out.state_w", d, d, d);
        let out_ctx_w = mat("dec.out.ctx_w", d, d, d);
        let proj_w = mat("proj.w", v, d, d);
        let mut zeros = |name: &str, n: usize| params.insert(name, Tensor::new(vec![n], vec![0.0; n]));
        let ids = Ids {
            embed,
            pos_enc,
            pos_dec,
            enc1_w,
            enc1_b: zeros("enc1.b", d),
            enc2_w,
            enc2_mix,
            enc2_b: zeros("enc2.b", d),
            init_w,
            init_b: zeros("dec.init.b", d),
            query_w,
            rec_w,
            in_w,
            ctx_w,
            rec_b: zeros("dec.rec.b", d),
            out_state_w,
            out_ctx_w,
            out_b: zeros("dec.out.b", d),
            proj_w,
            proj_b: zeros("proj.b", v),
        };
        Self {
            config,
            vocab,
            params,
            ids,
        }
    }

    /// Rebuild from a stored parameter set; layout must match `new`.
    pub fn from_parts(
        config: ToyConfig,
        vocab: Vocabulary,
        params: ParameterStore,
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(config, vocab);
        for (_, name, t) in model.params.iter() {
            let other = params
                .id(name)
                .map(|id| params.get(id))
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            if other.shape != t.shape {
                return Err(ModelError::Checkpoint(format!("shape mismatch for {name}")));
            }
        }
        if params.len() != model.params.len() {
            return Err(ModelError::Checkpoint("unexpected extra parameters".into()));
        }
        let mut ordered = ParameterStore::new();
        for (_, name, _) in model.params.iter() {
            ordered.insert(name, params.get(params.id(name).unwrap()).clone());
        }
        model.params = ordered;
        Ok(model)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn leaves(&self, g: &mut Graph) -> Leaves {
        let p = &self.params;
        let i = &self.ids;
        Leaves {
            embed: g.param(p, i.embed),
            pos_enc: g.param(p, i.pos_enc),
            pos_dec: g.param(p, i.pos_dec),
            enc1_w: g.param(p, i.enc1_w),
            enc1_b: g.param(p, i.enc1_b),
            enc2_w: g.param(p, i.enc2_w),
            enc2_mix: g.param(p, i.enc2_mix),
            enc2_b: g.param(p, i.enc2_b),
            init_w: g.param(p, i.init_w),
            init_b: g.param(p, i.init_b),
            query_w: g.param(p, i.query_w),
            rec_w: g.param(p, i.rec_w),
            in_w: g.param(p, i.in_w),
            ctx_w: g.param(p, i.ctx_w),
            rec_b: g.param(p, i.rec_b),
            out_state_w: g.param(p, i.out_state_w),
            out_ctx_w: g.param(p, i.out_ctx_w),
            out_b: g.param(p, i.out_b),
            proj_w: g.param(p, i.proj_w),
            proj_b: g.param(p, i.proj_b),
        }
    }

    fn source_ids(&self, source: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(source);
        ids.truncate(self.config.max_source_tokens);
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids
    }

    fn encode(&self, g: &mut Graph, l: &Leaves, src: &[usize]) -> Encoded {
        let first: Vec<NodeId> = src
            .iter()
            .enumerate()
            .map(|(pos, tok)| {
                let e = g.row(l.embed, *tok);
                let p = g.row(l.pos_enc, pos);
                let x = g.add(&[e, p]);
                let h = g.matvec(l.enc1_w, x);
                let h = g.add(&[h, l.enc1_b]);
                g.tanh(h)
            })
            .collect();
        let mean = g.mean(&first);
        let mixed = g.matvec(l.enc2_mix, mean);
        let states: Vec<NodeId> = first
            .iter()
            .map(|h1| {
                let h = g.matvec(l.enc2_w, *h1);
                let h = g.add(&[h, mixed, l.enc2_b]);
                g.tanh(h)
            })
            .collect();
        let pooled = g.mean(&states);
        let init = g.matvec(l.init_w, pooled);
        let init = g.add(&[init, l.init_b]);
        let init = g.tanh(init);
        Encoded { states, init }
    }

    /// One decoder step: returns the new recurrent state and vocabulary logits.
    fn step(&self, g: &mut Graph, l: &Leaves, enc: &Encoded, state: NodeId, prev: usize, pos: usize) -> (NodeId, NodeId) {
        let q = g.matvec(l.query_w, state);
        let scores: Vec<NodeId> = enc.states.iter().map(|h| g.dot(q, *h)).collect();
        let scores = g.stack(&scores);
        let attn = g.softmax(scores);
        let ctx = g.mix(attn, &enc.states);

        let e = g.row(l.embed, prev);
        let p = g.row(l.pos_dec, pos.min(self.config.max_target_tokens));
        let x = g.add(&[e, p]);
        let a = g.matvec(l.rec_w, state);
        let b = g.matvec(l.in_w, x);
        let c = g.matvec(l.ctx_w, ctx);
        let s = g.add(&[a, b, c, l.rec_b]);
        let s = g.tanh(s);

        let o1 = g.matvec(l.out_state_w, s);
        let o2 = g.matvec(l.out_ctx_w, ctx);
        let o = g.add(&[o1, o2, l.out_b]);
        let o = g.tanh(o);
        let logits = g.matvec(l.proj_w, o);
        let logits = g.add(&[logits, l.proj_b]);
        (s, logits)
    }

    fn greedy(&self, source: &str, max_tokens: usize) -> Vec<usize> {
        let mut g = Graph::new();
        let l = self.leaves(&mut g);
        let enc = self.encode(&mut g, &l, &self.source_ids(source));
        let mut state = enc.init;
        let mut prev = BOS_ID;
        let mut out = Vec::new();
        for pos in 0..max_tokens {
            let (s, logits) = self.step(&mut g, &l, &enc, state, prev, pos);
            let tok = argmax_allowed(g.value(logits));
            if tok == EOS_ID {
                break;
            }
            out.push(tok);
            state = s;
            prev = tok;
        }
        out
    }

    fn beam(&self, source: &str, beams: usize, max_tokens: usize) -> Vec<usize> {
        #[derive(Clone)]
        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            state: NodeId,
            done: bool,
        }
        let mut g = Graph::new();
        let l = self.leaves(&mut g);
        let enc = self.encode(&mut g, &l, &self.source_ids(source));
        let mut hyps = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            state: enc.init,
            done: false,
        }];
        for pos in 0..=max_tokens {
            if hyps.iter().all(|h| h.done) {
                break;
            }
            let mut next: Vec<Hyp> = Vec::new();
            for h in &hyps {
                if h.done {
                    next.push(h.clone());
                    continue;
                }
                let prev = h.tokens.last().copied().unwrap_or(BOS_ID);
                let (s, logits) = self.step(&mut g, &l, &enc, h.state, prev, pos);
                let z = g.value(logits);
                let lse = log_sum_exp(z);
                if pos == max_tokens {
                    // length limit reached: only termination remains
                    next.push(Hyp {
                        tokens: h.tokens.clone(),
                        score: h.score + (z[EOS_ID] - lse),
                        state: s,
                        done: true,
                    });
                    continue;
                }
                let mut cands: Vec<(usize, f64)> = z
                    .iter()
                    .enumerate()
                    .filter(|(t, _)| allowed(*t))
                    .map(|(t, zt)| (t, zt - lse))
                    .collect();
                cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                for (tok, lp) in cands.into_iter().take(beams) {
                    let mut tokens = h.tokens.clone();
                    let done = tok == EOS_ID;
                    if !done {
                        tokens.push(tok);
                    }
                    next.push(Hyp {
                        tokens,
                        score: h.score + lp,
                        state: s,
                        done,
                    });
                }
            }
            next.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
            next.truncate(beams);
            hyps = next;
        }
        hyps.into_iter()
            .max_by(|a, b| a.score.total_cmp(&b.score).then_with(|| b.tokens.cmp(&a.tokens)))
            .map(|h| h.tokens)
            .unwrap_or_default()
    }
}

fn allowed(tok: usize) -> bool {
    tok != PAD_ID && tok != BOS_ID
}

fn argmax_allowed(z: &[f64]) -> usize {
    let mut best = EOS_ID;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in z.iter().enumerate() {
        if allowed(i) && *v > best_v {
            best = i;
            best_v = *v;
        }
    }
    best
}

impl TextToTextModel for ToySeq2Seq {
    fn backend_id(&self) -> &str {
        BACKEND_ID
    }

    fn parameters(&self) -> &ParameterStore {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn compute_loss(&self, source: &str, target: &str) -> Result<Loss, ModelError> {
        let mut tgt = self.vocab.encode(target);
        if tgt.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        tgt.truncate(self.config.max_target_tokens);
        tgt.push(EOS_ID);

        let mut g = Graph::new();
        let l = self.leaves(&mut g);
        let enc = self.encode(&mut g, &l, &self.source_ids(source));
        let mut state = enc.init;
        let mut prev = BOS_ID;
        let mut terms = Vec::with_capacity(tgt.len());
        for (pos, tok) in tgt.iter().enumerate() {
            let (s, logits) = self.step(&mut g, &l, &enc, state, prev, pos);
            terms.push(g.cross_entropy(logits, *tok));
            state = s;
            prev = *tok;
        }
        let root = g.mean(&terms);
        Ok(Loss::new(g, root))
    }

    fn generate(&self, source: &str, cfg: &GenerationConfig) -> String {
        let max = cfg.max_output_tokens.max(1);
        let ids = if cfg.num_beams <= 1 {
            self.greedy(source, max)
        } else {
            self.beam(source, cfg.num_beams, max)
        };
        self.vocab.decode(&ids)
    }

    fn save_checkpoint(&self, dir: &Path, metadata: serde_json::Value) -> Result<(), ModelError> {
        super::checkpoint::save_checkpoint(self, dir, metadata).map(|_| ())
    }
}
