//! Selective unlearning. The masked contrastive objective partitions the
//! token-wise cross entropy into a privacy stream (masked entity tokens,
//! maximized) and a context stream (everything else, minimized):
//!
//! ```text
//! L_priv = Σ M_t·ℓ_t / (Σ M_t + ε)      L_gen = Σ (1−M_t)·ℓ_t / (Σ (1−M_t) + ε)
//! J      = α·L_gen − β·L_priv           (minimized over adapter parameters)
//! ```
//!
//! The full-sequence gradient-ascent baseline maximizes mean CE over all
//! tokens instead. Both run in the same loop over frozen base weights.

mod run;

pub use run::{
    early_stop_check, read_trace, unlearn, write_trace, EarlyStopConfig, EpochSnapshot,
    EvalHook, StopDecision, StopReason, TraceRow, UnlearnConfig, UnlearnMode, UnlearnRun,
};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// The three pieces of the contrastive objective for one batch or sequence.
pub struct LossParts {
    pub objective: Var,
    pub priv_stream: Var,
    pub gen_stream: Var,
}

/// Raw stream sums for pooled batching: Σ masked ℓ, Σ context ℓ, and the two
/// token counts. Denominators are data (not differentiated through).
pub fn stream_sums<E: Scalar>(
    tape: &mut Tape<E>,
    ce: Var,
    mask: &[u8],
) -> Result<(Var, Var, usize, usize)> {
    let n = tape.value(ce).numel();
    if mask.len() != n {
        return Err(Error::Contract(format!(
            "mask length {} vs {} loss positions",
            mask.len(),
            n
        )));
    }
    let priv_w: Vec<E> = mask.iter().map(|&m| if m == 1 { E::one() } else { E::zero() }).collect();
    let gen_w: Vec<E> = mask.iter().map(|&m| if m == 1 { E::zero() } else { E::one() }).collect();
    let priv_count = mask.iter().filter(|&&m| m == 1).count();
    let gen_count = n - priv_count;
    let priv_sum = tape.weighted_sum(ce, priv_w)?;
    let gen_sum = tape.weighted_sum(ce, gen_w)?;
    Ok((priv_sum, gen_sum, priv_count, gen_count))
}

/// Contrastive loss for one (logits, targets, mask) triple. `mask[t]`
/// annotates `targets[t]`.
pub fn contrastive_loss<E: Scalar>(
    tape: &mut Tape<E>,
    logits: Var,
    targets: &[u32],
    mask: &[u8],
    alpha: f64,
    beta: f64,
    epsilon: f64,
) -> Result<LossParts> {
    if epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be > 0".into()));
    }
    let target_ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let ce = tape.cross_entropy_rows(logits, &target_ids)?;
    let (priv_sum, gen_sum, priv_count, gen_count) = stream_sums(tape, ce, mask)?;
    let priv_stream = tape.scale(priv_sum, E::from_f64_lossy(1.0 / (priv_count as f64 + epsilon)));
    let gen_stream = tape.scale(gen_sum, E::from_f64_lossy(1.0 / (gen_count as f64 + epsilon)));
    let a = tape.scale(gen_stream, E::from_f64_lossy(alpha));
    let b = tape.scale(priv_stream, E::from_f64_lossy(-beta));
    let objective = tape.add(a, b)?;
    Ok(LossParts {
        objective,
        priv_stream,
        gen_stream,
    })
}

/// Full-sequence gradient-ascent objective: the negative mean CE over all
/// tokens. Minimizing it maximizes sequence likelihood loss.
pub fn ga_loss<E: Scalar>(tape: &mut Tape<E>, logits: Var, targets: &[u32]) -> Result<Var> {
    let target_ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let ce = tape.cross_entropy_rows(logits, &target_ids)?;
    let n = target_ids.len();
    tape.weighted_sum(ce, vec![E::from_f64_lossy(-1.0 / n as f64); n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    /// Logits row over V=2 whose CE at target 0 equals `ce`.
    fn row_with_ce(ce: f64) -> [f64; 2] {
        // ℓ = ln(1 + e^z) ⇒ z = ln(e^ℓ − 1)
        [0.0, (ce.exp() - 1.0).ln()]
    }

    #[test]
    fn uniform_logits_balance_streams() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![4, 8]), false);
        let parts =
            contrastive_loss(&mut tape, logits, &[0, 1, 2, 3], &[1, 0, 1, 0], 1.0, 1.0, 1e-8)
                .unwrap();
        let ln8 = 8.0f64.ln();
        assert!((tape.value(parts.priv_stream).item() - ln8).abs() < 1e-6);
        assert!((tape.value(parts.gen_stream).item() - ln8).abs() < 1e-6);
        assert!(tape.value(parts.objective).item().abs() < 1e-6);
    }

    #[test]
    fn empty_privacy_stream_is_exact_zero() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 8]), false);
        let parts =
            contrastive_loss(&mut tape, logits, &[0, 1, 2], &[0, 0, 0], 1.0, 1.0, 1e-8).unwrap();
        assert_eq!(tape.value(parts.priv_stream).item(), 0.0);
        // J = α·(mean CE over all tokens), up to the ε in the denominator.
        let ln8 = 8.0f64.ln();
        assert!((tape.value(parts.objective).item() - ln8).abs() < 1e-6);
    }

    #[test]
    fn hand_arithmetic_case() {
        // ℓ = [1.0, 3.0], M = [1, 0], α = β = 1, ε = 1e-8
        let mut tape = Tape::<f64>::new();
        let mut data = Vec::new();
        data.extend_from_slice(&row_with_ce(1.0));
        data.extend_from_slice(&row_with_ce(3.0));
        let logits = tape.leaf(Tensor::new(vec![2, 2], data).unwrap(), false);
        let parts = contrastive_loss(&mut tape, logits, &[0, 0], &[1, 0], 1.0, 1.0, 1e-8).unwrap();
        assert!((tape.value(parts.priv_stream).item() - 1.0).abs() < 1e-7);
        assert!((tape.value(parts.gen_stream).item() - 3.0).abs() < 1e-7);
        assert!((tape.value(parts.objective).item() - 2.0).abs() < 1e-7);
    }

    #[test]
    fn mask_length_mismatch_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 4]), false);
        assert!(matches!(
            contrastive_loss(&mut tape, logits, &[0, 1, 2], &[1, 0], 1.0, 1.0, 1e-8),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ga_is_negative_mean_ce() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![5, 8]), false);
        let ga = ga_loss(&mut tape, logits, &[0, 1, 2, 3, 4]).unwrap();
        assert!((tape.value(ga).item() + 8.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ga_equals_contrastive_with_all_ones_mask() {
        let mut tape = Tape::<f64>::new();
        let mut data = Vec::new();
        for ce in [0.5, 1.5, 2.5] {
            data.extend_from_slice(&row_with_ce(ce));
        }
        let logits = tape.leaf(Tensor::new(vec![3, 2], data).unwrap(), false);
        let ga = ga_loss(&mut tape, logits, &[0, 0, 0]).unwrap();
        let logits2 = tape.leaf(tape.value(logits).clone(), false);
        let parts =
            contrastive_loss(&mut tape, logits2, &[0, 0, 0], &[1, 1, 1], 0.0, 1.0, 1e-8).unwrap();
        let diff = (tape.value(ga).item() - tape.value(parts.objective).item()).abs();
        assert!(diff < 1e-7, "ε-dominated difference, got {diff}");
    }

    /// Partition identity: Σℓ = L_priv·(ΣM+ε) + L_gen·(Σ(1−M)+ε).
    #[test]
    fn partition_identity_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let v = rng.gen_range(2..9);
            let data: Vec<f64> = (0..n * v).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let targets: Vec<u32> = (0..n).map(|_| rng.gen_range(0..v) as u32).collect();
            let mask: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
            let eps = 1e-8;

            let mut tape = Tape::<f64>::new();
            let logits = tape.leaf(Tensor::new(vec![n, v], data).unwrap(), false);
            let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
            let ce = tape.cross_entropy_rows(logits, &ids).unwrap();
            let total: f64 = tape.value(ce).data().iter().sum();

            let logits2 = tape.leaf(tape.value(logits).clone(), false);
            let parts =
                contrastive_loss(&mut tape, logits2, &targets, &mask, 1.0, 1.0, eps).unwrap();
            let m = mask.iter().filter(|&&x| x == 1).count() as f64;
            let recon = tape.value(parts.priv_stream).item() * (m + eps)
                + tape.value(parts.gen_stream).item() * ((n as f64 - m) + eps);
            let rel = (total - recon).abs() / total.abs().max(1e-12);
            assert!(rel < 1e-6, "partition violated: {total} vs {recon}");
        }
    }
}
