use proptest::prelude::*;
use sddpm_core::lif::{lif_sequence, Firing, LifParams};
use sddpm_core::Tensor;

fn constant_drive(c: f64, v_th: f64, steps: usize) -> Vec<f64> {
    let params = LifParams { decay: 1.0, threshold: v_th, reset: 0.0, alpha: 2.0 };
    let x = Tensor::<f64>::full(&[steps, 1], c);
    let (s, _) = lif_sequence(&x, steps, &params, Firing::Spike).unwrap();
    s.into_data()
}

proptest! {
    // Multiples of 1/64 add exactly, so the closed form holds bit for bit.
    #[test]
    fn constant_input_spike_count_law(k in 1u32..=64, j in 1u32..=192, steps in 1usize..=64) {
        let period = j.div_ceil(k) as usize;
        let spikes = constant_drive(k as f64 / 64.0, j as f64 / 64.0, steps);
        let count = spikes.iter().filter(|&&s| s == 1.0).count();
        prop_assert_eq!(count, steps / period);
        for (n, s) in spikes.iter().enumerate() {
            prop_assert_eq!(*s == 1.0, (n + 1) % period == 0);
        }
    }
}

#[test]
fn overflow_above_threshold_is_discarded() {
    // 0.75 per step against 1.0: fires at 2, 4, 6 with hard reset, never on consecutive steps.
    assert_eq!(constant_drive(0.75, 1.0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}
