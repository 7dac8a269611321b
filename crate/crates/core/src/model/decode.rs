//! Greedy autoregressive decoding and confidence-ordered iterative
//! unmasking for the masked-diffusion mode.

use crate::error::{Error, Result};
use crate::tape::softmax_row_raw;
use crate::MASK_TOKEN;

use super::{forward, AttentionMode, Weights};

/// One intermediate state of a masked-diffusion decode. `tokens` is the
/// sequence at the start of the step (masked positions hold the MASK id);
/// `unmasked` lists the commitments made during the step.
#[derive(Debug, Clone)]
pub struct MaskState {
    pub tokens: Vec<usize>,
    pub observed: Vec<bool>,
    pub step: usize,
    pub unmasked: Vec<UnmaskEvent>,
}

#[derive(Debug, Clone, Copy)]
pub struct UnmaskEvent {
    pub position: usize,
    pub token: usize,
    pub confidence: f32,
}

/// Greedy argmax with ties broken by lowest token id.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` by `n_new` tokens.
pub fn decode_ar(weights: &Weights, prompt: &[usize], n_new: usize) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Usage("decode_ar requires a nonempty prompt".into()));
    }
    if prompt.len() + n_new > weights.config.max_positions {
        return Err(Error::SequenceTooLong {
            got: prompt.len() + n_new,
            limit: weights.config.max_positions,
        });
    }
    let mut seq = prompt.to_vec();
    for _ in 0..n_new {
        let trace = forward(weights, &seq)?;
        let next = argmax(trace.logits.row(seq.len() - 1));
        seq.push(next);
    }
    Ok(seq)
}

/// Iterative unmasking: the generation region starts fully masked; each step
/// commits the `ceil(remaining / steps_remaining)` masked positions with the
/// highest max-probability (ties to the lowest position), taking the greedy
/// token at each. Returns the final sequence and one [`MaskState`] per step.
pub fn decode_mdm(
    weights: &Weights,
    prompt: &[usize],
    gen_len: usize,
    steps: usize,
) -> Result<(Vec<usize>, Vec<MaskState>)> {
    if steps == 0 || steps > gen_len {
        return Err(Error::InvalidParameter(format!(
            "steps {steps} outside 1..={gen_len}"
        )));
    }
    decode_mdm_inner(weights, prompt, gen_len, steps, None)
}

/// Masked-diffusion decode with the unmask positions forced to an external
/// schedule (one position list per step). Tokens are still chosen greedily
/// from this run's own logits; used to align a corrupt-prompt trajectory
/// with a clean run's schedule.
pub fn decode_mdm_forced(
    weights: &Weights,
    prompt: &[usize],
    gen_len: usize,
    schedule: &[Vec<usize>],
) -> Result<(Vec<usize>, Vec<MaskState>)> {
    decode_mdm_inner(weights, prompt, gen_len, schedule.len(), Some(schedule))
}

fn decode_mdm_inner(
    weights: &Weights,
    prompt: &[usize],
    gen_len: usize,
    steps: usize,
    schedule: Option<&[Vec<usize>]>,
) -> Result<(Vec<usize>, Vec<MaskState>)> {
    if weights.config.attention_mode != AttentionMode::Full {
        return Err(Error::Usage(
            "decode_mdm requires full-attention weights".into(),
        ));
    }
    if prompt.is_empty() {
        return Err(Error::Usage("decode_mdm requires a nonempty prompt".into()));
    }
    if prompt.len() + gen_len > weights.config.max_positions {
        return Err(Error::SequenceTooLong {
            got: prompt.len() + gen_len,
            limit: weights.config.max_positions,
        });
    }

    let total = prompt.len() + gen_len;
    let mut seq = prompt.to_vec();
    seq.extend(std::iter::repeat(MASK_TOKEN).take(gen_len));
    let mut observed: Vec<bool> = (0..total).map(|i| i < prompt.len()).collect();
    let mut trajectory = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut state = MaskState {
            tokens: seq.clone(),
            observed: observed.clone(),
            step,
            unmasked: Vec::new(),
        };
        let trace = forward(weights, &seq)?;
        let masked: Vec<usize> = (prompt.len()..total).filter(|&p| !observed[p]).collect();
        if masked.is_empty() {
            return Err(Error::Usage(format!(
                "no masked positions left at step {step}"
            )));
        }

        let picks: Vec<usize> = match schedule {
            Some(s) => {
                let forced = &s[step];
                for &p in forced {
                    if !masked.contains(&p) {
                        return Err(Error::Pairing(format!(
                            "forced schedule unmasks position {p} which is not masked at step {step}"
                        )));
                    }
                }
                forced.clone()
            }
            None => {
                let mut scored: Vec<(usize, f32)> = masked
                    .iter()
                    .map(|&p| {
                        let row = trace.logits.row(p);
                        let mut probs = vec![0.0f32; row.len()];
                        softmax_row_raw(row, &mut probs);
                        (p, probs[argmax(row)])
                    })
                    .collect();
                // Highest confidence first; ties to the lowest position.
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let n_unmask = masked.len().div_ceil(steps - step);
                scored.truncate(n_unmask);
                scored.into_iter().map(|(p, _)| p).collect()
            }
        };

        for &p in &picks {
            let row = trace.logits.row(p);
            let token = argmax(row);
            let mut probs = vec![0.0f32; row.len()];
            softmax_row_raw(row, &mut probs);
            state.unmasked.push(UnmaskEvent {
                position: p,
                token,
                confidence: probs[token],
            });
            seq[p] = token;
            observed[p] = true;
        }
        trajectory.push(state);
    }

    if seq.iter().any(|&t| t == MASK_TOKEN) && schedule.is_none() {
        return Err(Error::Usage(
            "masked positions remain after the final step".into(),
        ));
    }
    Ok((seq, trajectory))
}
