//! Forward pass with full activation tracing and intervention hooks.
//!
//! Each edge-target read point materializes its own copy of the residual
//! stream, so reverse mode yields a separate gradient per (node, slot)
//! input. Reads can be reassembled from per-source contributions, which is
//! how edge patching and circuit faithfulness runs replace individual
//! contributions with cached values from another run.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Node, Slot};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::PAD_TOKEN;

use super::{AttentionMode, Weights, RMS_EPS};

/// Additive attention mask value for blocked key columns.
const MASK_NEG: f32 = -1e30;

/// Absolute slot-input replacement: before `node` consumes its `slot` input,
/// the row at `position` is overwritten with `value`.
#[derive(Debug, Clone)]
pub struct Intervention {
    pub node: Node,
    pub slot: Slot,
    pub position: usize,
    pub value: Vec<f32>,
}

pub type InterventionMap = BTreeMap<(Node, Slot), Vec<(usize, Vec<f32>)>>;

/// Per-edge contribution replacement used by patched runs: at the keyed read
/// point, the listed sources contribute the given tensors instead of their
/// live outputs.
pub(crate) type EdgeOverrideMap<'a> = BTreeMap<(Node, Slot), Vec<(Node, &'a Tensor)>>;

#[derive(Default)]
pub(crate) struct RunSpec<'a> {
    pub record: bool,
    /// Replace the Input node's output (token + position embeddings).
    pub input_override: Option<&'a Tensor>,
    pub edge_overrides: Option<&'a EdgeOverrideMap<'a>>,
    pub interventions: Option<&'a InterventionMap>,
}

pub(crate) struct TapedRun {
    pub tape: Tape,
    pub logits: TensorId,
    /// Component outputs in residual write order, Input (embedding) first.
    pub node_out: Vec<(Node, TensorId)>,
    /// Materialized slot inputs per edge target, canonical read order.
    pub slot_in: Vec<((Node, Slot), TensorId)>,
    pub resid_pre: Vec<TensorId>,
    pub resid_mid: Vec<TensorId>,
    pub resid_post: Vec<TensorId>,
    pub patterns: Vec<Vec<TensorId>>,
    /// Registered parameter leaves in canonical tensor order.
    pub param_ids: Vec<(String, TensorId)>,
}

impl TapedRun {
    pub fn slot_input_id(&self, node: Node, slot: Slot) -> Option<TensorId> {
        self.slot_in
            .iter()
            .find(|((n, s), _)| *n == node && *s == slot)
            .map(|(_, id)| *id)
    }
}

fn build_attention_mask(mode: AttentionMode, tokens: &[usize]) -> Tensor {
    let seq = tokens.len();
    let mut data = vec![0.0f32; seq * seq];
    for i in 0..seq {
        for j in 0..seq {
            let causal_block = mode == AttentionMode::Causal && j > i;
            let pad_block = tokens[j] == PAD_TOKEN;
            if causal_block || pad_block {
                data[i * seq + j] = MASK_NEG;
            }
        }
    }
    Tensor::matrix(seq, seq, data).expect("mask shape")
}

/// Assemble the residual value consumed at one read point. Without
/// overrides this is the running residual itself; with overrides the
/// contributions are folded in write order, substituting replaced sources,
/// which keeps the all-replaced and none-replaced cases bit-identical to
/// the pure corrupt and clean runs.
fn read_point(
    tape: &mut Tape,
    node: Node,
    slot: Slot,
    running: TensorId,
    written: &[(Node, TensorId)],
    spec: &RunSpec,
) -> Result<TensorId> {
    let key = (node, slot);
    let overrides = spec.edge_overrides.and_then(|m| m.get(&key));
    let mut x = match overrides {
        None => tape.copy(running),
        Some(subs) => {
            let mut acc: Option<TensorId> = None;
            for (src, live) in written {
                let contrib = match subs.iter().find(|(n, _)| n == src) {
                    Some((_, replacement)) => tape.leaf(replacement),
                    None => *live,
                };
                acc = Some(match acc {
                    None => contrib,
                    Some(prev) => tape.add(prev, contrib)?,
                });
            }
            acc.expect("input node always contributes")
        }
    };
    if let Some(rows) = spec.interventions.and_then(|m| m.get(&key)) {
        let (_, cols) = tape.dims(x);
        let mut positions = Vec::with_capacity(rows.len());
        let mut patch = Vec::with_capacity(rows.len() * cols);
        for (pos, value) in rows {
            positions.push(*pos);
            patch.extend_from_slice(value);
        }
        let patch_id = tape.leaf_matrix(positions.len(), cols, patch);
        x = tape.overwrite_rows(x, patch_id, &positions)?;
    }
    Ok(x)
}

pub(crate) fn run(weights: &Weights, tokens: &[usize], spec: &RunSpec) -> Result<TapedRun> {
    let cfg = &weights.config;
    if tokens.is_empty() {
        return Err(Error::Usage("forward on empty sequence".into()));
    }
    if tokens.len() > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            got: tokens.len(),
            limit: cfg.max_positions,
        });
    }
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                got: t,
                limit: cfg.vocab_size,
            });
        }
    }
    let seq = tokens.len();
    let mut tape = Tape::new(spec.record);

    let mut param_ids = Vec::new();
    for (name, t) in weights.tensors() {
        param_ids.push((name, tape.leaf(t)));
    }
    let find = |name: &str, ids: &[(String, TensorId)]| -> TensorId {
        ids.iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .expect("canonical tensor name")
    };
    let tok_emb = find("tok_emb", &param_ids);
    let pos_emb = find("pos_emb", &param_ids);
    let final_gain = find("final_gain", &param_ids);
    let unembed = find("unembed", &param_ids);

    let emb = match spec.input_override {
        Some(m) => {
            let (r, c) = m.dims();
            if r != seq || c != cfg.d_model {
                return Err(Error::DimMismatch {
                    op: "input override",
                    left: vec![r, c],
                    right: vec![seq, cfg.d_model],
                });
            }
            tape.leaf(m)
        }
        None => {
            let te = tape.gather_rows(tok_emb, tokens)?;
            let pe = tape.slice_rows(pos_emb, 0, seq)?;
            tape.add(te, pe)?
        }
    };

    let mask = build_attention_mask(cfg.attention_mode, tokens);
    let mask_id = tape.leaf(&mask);
    let inv_sqrt_dh = 1.0 / (cfg.d_head as f32).sqrt();

    let mut written: Vec<(Node, TensorId)> = vec![(Node::Input, emb)];
    let mut slot_in = Vec::new();
    let mut resid_pre = Vec::new();
    let mut resid_mid = Vec::new();
    let mut resid_post = Vec::new();
    let mut patterns = Vec::new();
    let mut resid = emb;

    for (l, layer) in weights.layers.iter().enumerate() {
        resid_pre.push(resid);
        let attn_gain = find(&format!("layer{l}.attn_gain"), &param_ids);
        let mlp_gain = find(&format!("layer{l}.mlp_gain"), &param_ids);
        let w_in = find(&format!("layer{l}.w_in"), &param_ids);
        let w_out = find(&format!("layer{l}.w_out"), &param_ids);

        let mut head_outs = Vec::with_capacity(layer.heads.len());
        let mut layer_patterns = Vec::with_capacity(layer.heads.len());
        for h in 0..layer.heads.len() {
            let node = Node::Head { layer: l, head: h };
            let xq = read_point(&mut tape, node, Slot::Q, resid, &written, spec)?;
            let xk = read_point(&mut tape, node, Slot::K, resid, &written, spec)?;
            let xv = read_point(&mut tape, node, Slot::V, resid, &written, spec)?;
            slot_in.push(((node, Slot::Q), xq));
            slot_in.push(((node, Slot::K), xk));
            slot_in.push(((node, Slot::V), xv));

            let nq = tape.rmsnorm(xq, attn_gain, RMS_EPS)?;
            let nk = tape.rmsnorm(xk, attn_gain, RMS_EPS)?;
            let nv = tape.rmsnorm(xv, attn_gain, RMS_EPS)?;
            let w_q = find(&format!("layer{l}.head{h}.w_q"), &param_ids);
            let w_k = find(&format!("layer{l}.head{h}.w_k"), &param_ids);
            let w_v = find(&format!("layer{l}.head{h}.w_v"), &param_ids);
            let w_o = find(&format!("layer{l}.head{h}.w_o"), &param_ids);
            let q = tape.matmul(nq, w_q)?;
            let k = tape.matmul(nk, w_k)?;
            let v = tape.matmul(nv, w_v)?;
            let scores = tape.matmul_bt(q, k)?;
            let scaled = tape.scale(scores, inv_sqrt_dh);
            let masked = tape.add(scaled, mask_id)?;
            let pattern = tape.softmax_rows(masked);
            layer_patterns.push(pattern);
            let ctx = tape.matmul(pattern, v)?;
            let out = tape.matmul(ctx, w_o)?;
            head_outs.push(out);
        }
        patterns.push(layer_patterns);
        for (h, out) in head_outs.iter().enumerate() {
            resid = tape.add(resid, *out)?;
            written.push((Node::Head { layer: l, head: h }, *out));
        }
        resid_mid.push(resid);

        let node = Node::Mlp { layer: l };
        let xm = read_point(&mut tape, node, Slot::In, resid, &written, spec)?;
        slot_in.push(((node, Slot::In), xm));
        let nm = tape.rmsnorm(xm, mlp_gain, RMS_EPS)?;
        let hidden = tape.matmul(nm, w_in)?;
        let act = tape.silu(hidden);
        let mlp_out = tape.matmul(act, w_out)?;
        resid = tape.add(resid, mlp_out)?;
        written.push((node, mlp_out));
        resid_post.push(resid);
    }

    let xl = read_point(&mut tape, Node::Logits, Slot::In, resid, &written, spec)?;
    slot_in.push(((Node::Logits, Slot::In), xl));
    let normed = tape.rmsnorm(xl, final_gain, RMS_EPS)?;
    let logits = tape.matmul(normed, unembed)?;

    Ok(TapedRun {
        tape,
        logits,
        node_out: written,
        slot_in,
        resid_pre,
        resid_mid,
        resid_post,
        patterns,
        param_ids,
    })
}

/// Per-component activations for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    /// Input-node output: token plus position embeddings.
    pub embedding: Tensor,
    pub resid_pre: Vec<Tensor>,
    pub resid_mid: Vec<Tensor>,
    pub resid_post: Vec<Tensor>,
    /// `head_out[layer][head]`, post output-projection, pre residual add.
    pub head_out: Vec<Vec<Tensor>>,
    pub mlp_out: Vec<Tensor>,
    pub patterns: Vec<Vec<Tensor>>,
    pub logits: Tensor,
}

impl ForwardTrace {
    fn from_run(tokens: &[usize], run: &TapedRun) -> Self {
        let t = &run.tape;
        let mut head_out = Vec::new();
        let mut mlp_out = Vec::new();
        let mut current_layer: Vec<Tensor> = Vec::new();
        for (node, id) in &run.node_out {
            match node {
                Node::Input => {}
                Node::Head { .. } => current_layer.push(t.to_tensor(*id)),
                Node::Mlp { .. } => {
                    head_out.push(std::mem::take(&mut current_layer));
                    mlp_out.push(t.to_tensor(*id));
                }
                Node::Logits => {}
            }
        }
        ForwardTrace {
            tokens: tokens.to_vec(),
            embedding: t.to_tensor(run.node_out[0].1),
            resid_pre: run.resid_pre.iter().map(|id| t.to_tensor(*id)).collect(),
            resid_mid: run.resid_mid.iter().map(|id| t.to_tensor(*id)).collect(),
            resid_post: run.resid_post.iter().map(|id| t.to_tensor(*id)).collect(),
            head_out,
            mlp_out,
            patterns: run
                .patterns
                .iter()
                .map(|ps| ps.iter().map(|id| t.to_tensor(*id)).collect())
                .collect(),
            logits: t.to_tensor(run.logits),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn final_residual(&self) -> &Tensor {
        self.resid_post.last().expect("n_layers >= 1")
    }

    /// Residual-stream write vector of an attention head or MLP.
    pub fn component_output(&self, node: Node, position: usize) -> Result<&[f32]> {
        if position >= self.seq_len() {
            return Err(Error::IndexOutOfRange {
                what: "trace position",
                got: position,
                limit: self.seq_len(),
            });
        }
        let out = self.node_output(node)?;
        Ok(out.row(position))
    }

    /// Full output matrix of any writing node (Input included).
    pub fn node_output(&self, node: Node) -> Result<&Tensor> {
        match node {
            Node::Input => Ok(&self.embedding),
            Node::Head { layer, head } => self
                .head_out
                .get(layer)
                .and_then(|hs| hs.get(head))
                .ok_or_else(|| Error::Graph(format!("node {node} out of range"))),
            Node::Mlp { layer } => self
                .mlp_out
                .get(layer)
                .ok_or_else(|| Error::Graph(format!("node {node} out of range"))),
            Node::Logits => Err(Error::Graph("logits node has no output vector".into())),
        }
    }

    /// Residual value consumed at a read point (the same value feeds every
    /// slot of the point's sublayer).
    pub fn slot_input(&self, node: Node, _slot: Slot) -> Result<&Tensor> {
        match node {
            Node::Head { layer, .. } => self
                .resid_pre
                .get(layer)
                .ok_or_else(|| Error::Graph(format!("node {node} out of range"))),
            Node::Mlp { layer } => self
                .resid_mid
                .get(layer)
                .ok_or_else(|| Error::Graph(format!("node {node} out of range"))),
            Node::Logits => Ok(self.final_residual()),
            Node::Input => Err(Error::Graph("input node has no slot input".into())),
        }
    }
}

/// Plain forward pass. Deterministic; the trace owns all activations.
pub fn forward(weights: &Weights, tokens: &[usize]) -> Result<ForwardTrace> {
    let r = run(weights, tokens, &RunSpec::default())?;
    Ok(ForwardTrace::from_run(tokens, &r))
}

fn validate_intervention(weights: &Weights, seq: usize, iv: &Intervention) -> Result<()> {
    let cfg = &weights.config;
    let node_ok = match iv.node {
        Node::Head { layer, head } => layer < cfg.n_layers && head < cfg.n_heads,
        Node::Mlp { layer } => layer < cfg.n_layers,
        Node::Logits => true,
        Node::Input => false,
    };
    let slot_ok = match iv.node {
        Node::Head { .. } => matches!(iv.slot, Slot::Q | Slot::K | Slot::V),
        Node::Mlp { .. } | Node::Logits => iv.slot == Slot::In,
        Node::Input => false,
    };
    if !node_ok || !slot_ok {
        return Err(Error::Graph(format!(
            "intervention target {}<{}> not in graph",
            iv.node, iv.slot
        )));
    }
    if iv.position >= seq {
        return Err(Error::IndexOutOfRange {
            what: "intervention position",
            got: iv.position,
            limit: seq,
        });
    }
    if iv.value.len() != cfg.d_model {
        return Err(Error::DimMismatch {
            op: "intervention width",
            left: vec![iv.value.len()],
            right: vec![cfg.d_model],
        });
    }
    Ok(())
}

/// Forward pass with the named slot inputs replaced before their consumers
/// compute. Untouched computation is identical to [`forward`].
pub fn intervene_forward(
    weights: &Weights,
    tokens: &[usize],
    interventions: &[Intervention],
) -> Result<Tensor> {
    let mut map: InterventionMap = BTreeMap::new();
    for iv in interventions {
        validate_intervention(weights, tokens.len(), iv)?;
        map.entry((iv.node, iv.slot))
            .or_default()
            .push((iv.position, iv.value.clone()));
    }
    let spec = RunSpec {
        record: false,
        interventions: if map.is_empty() { None } else { Some(&map) },
        ..RunSpec::default()
    };
    let r = run(weights, tokens, &spec)?;
    Ok(r.tape.to_tensor(r.logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMode, ModelConfig, Weights};

    fn cfg(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: 23,
            max_positions: 12,
            attention_mode: mode,
        }
    }

    fn toks() -> Vec<usize> {
        vec![2, 5, 9, 3, 7, 11]
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let w = Weights::zeros(cfg(AttentionMode::Causal)).unwrap();
        let trace = forward(&w, &toks()).unwrap();
        assert!(trace.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let w = Weights::init(cfg(AttentionMode::Causal), 0).unwrap();
        assert!(matches!(
            forward(&w, &[1, 99]),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            forward(&w, &vec![2; 13]),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn causal_logits_ignore_suffix_edits() {
        let w = Weights::init(cfg(AttentionMode::Causal), 1).unwrap();
        let base = forward(&w, &toks()).unwrap();
        // Edit every position after t and check logits at <= t are unchanged.
        let t = 2usize;
        let mut edited = toks();
        for (i, tok) in edited.iter_mut().enumerate() {
            if i > t {
                *tok = (*tok + 3) % 20 + 2;
            }
        }
        let after = forward(&w, &edited).unwrap();
        for pos in 0..=t {
            assert_eq!(base.logits.row(pos), after.logits.row(pos), "pos {pos}");
        }
    }

    #[test]
    fn full_mode_sees_suffix_edits() {
        let w = Weights::init(cfg(AttentionMode::Full), 1).unwrap();
        let base = forward(&w, &toks()).unwrap();
        let mut edited = toks();
        edited[4] = 15;
        let after = forward(&w, &edited).unwrap();
        assert_ne!(base.logits.row(0), after.logits.row(0));
    }

    #[test]
    fn residual_stream_additivity() {
        let w = Weights::init(cfg(AttentionMode::Causal), 3).unwrap();
        let trace = forward(&w, &toks()).unwrap();
        let seq = trace.seq_len();
        let d = 16;
        for pos in 0..seq {
            let mut sum = trace.embedding.row(pos).to_vec();
            for l in 0..2 {
                for h in 0..2 {
                    for (s, v) in sum.iter_mut().zip(
                        trace
                            .component_output(Node::Head { layer: l, head: h }, pos)
                            .unwrap(),
                    ) {
                        *s += v;
                    }
                }
                for (s, v) in sum
                    .iter_mut()
                    .zip(trace.component_output(Node::Mlp { layer: l }, pos).unwrap())
                {
                    *s += v;
                }
            }
            let fin = trace.final_residual().row(pos);
            for j in 0..d {
                assert!(
                    (sum[j] - fin[j]).abs() < 1e-5,
                    "pos {pos} dim {j}: {} vs {}",
                    sum[j],
                    fin[j]
                );
            }
        }
    }

    #[test]
    fn empty_intervention_is_bit_exact_identity() {
        let w = Weights::init(cfg(AttentionMode::Causal), 4).unwrap();
        let trace = forward(&w, &toks()).unwrap();
        let logits = intervene_forward(&w, &toks(), &[]).unwrap();
        assert_eq!(trace.logits.data(), logits.data());
    }

    #[test]
    fn self_trace_interventions_are_identity() {
        let w = Weights::init(cfg(AttentionMode::Full), 5).unwrap();
        let trace = forward(&w, &toks()).unwrap();
        let mut ivs = Vec::new();
        for l in 0..2 {
            for h in 0..2 {
                let node = Node::Head { layer: l, head: h };
                for slot in [Slot::Q, Slot::K, Slot::V] {
                    let x = trace.slot_input(node, slot).unwrap();
                    for pos in 0..trace.seq_len() {
                        ivs.push(Intervention {
                            node,
                            slot,
                            position: pos,
                            value: x.row(pos).to_vec(),
                        });
                    }
                }
            }
            let node = Node::Mlp { layer: l };
            let x = trace.slot_input(node, Slot::In).unwrap();
            for pos in 0..trace.seq_len() {
                ivs.push(Intervention {
                    node,
                    slot: Slot::In,
                    position: pos,
                    value: x.row(pos).to_vec(),
                });
            }
        }
        let x = trace.slot_input(Node::Logits, Slot::In).unwrap();
        for pos in 0..trace.seq_len() {
            ivs.push(Intervention {
                node: Node::Logits,
                slot: Slot::In,
                position: pos,
                value: x.row(pos).to_vec(),
            });
        }
        let logits = intervene_forward(&w, &toks(), &ivs).unwrap();
        assert_eq!(trace.logits.data(), logits.data());
    }

    #[test]
    fn logits_input_replacement_reproduces_other_run() {
        let w = Weights::init(cfg(AttentionMode::Causal), 6).unwrap();
        let clean = toks();
        let mut corrupt = toks();
        corrupt[1] = 14;
        let corrupt_trace = forward(&w, &corrupt).unwrap();
        let ivs: Vec<Intervention> = (0..clean.len())
            .map(|pos| Intervention {
                node: Node::Logits,
                slot: Slot::In,
                position: pos,
                value: corrupt_trace.final_residual().row(pos).to_vec(),
            })
            .collect();
        let patched = intervene_forward(&w, &clean, &ivs).unwrap();
        for (a, b) in patched.data().iter().zip(corrupt_trace.logits.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn unknown_intervention_target_errors() {
        let w = Weights::init(cfg(AttentionMode::Causal), 0).unwrap();
        let iv = Intervention {
            node: Node::Head { layer: 9, head: 0 },
            slot: Slot::Q,
            position: 0,
            value: vec![0.0; 16],
        };
        assert!(matches!(
            intervene_forward(&w, &toks(), &[iv]),
            Err(Error::Graph(_))
        ));
        let iv = Intervention {
            node: Node::Mlp { layer: 0 },
            slot: Slot::Q,
            position: 0,
            value: vec![0.0; 16],
        };
        assert!(intervene_forward(&w, &toks(), &[iv]).is_err());
    }

    #[test]
    fn trailing_pad_is_invisible_in_full_mode() {
        let w = Weights::init(cfg(AttentionMode::Full), 8).unwrap();
        let base = toks();
        let mut padded = base.clone();
        padded.push(PAD_TOKEN);
        let a = forward(&w, &base).unwrap();
        let b = forward(&w, &padded).unwrap();
        for pos in 0..base.len() {
            for (x, y) in a.logits.row(pos).iter().zip(b.logits.row(pos)) {
                assert!((x - y).abs() < 1e-5, "pos {pos}");
            }
        }
    }
}
