use super::network::{NetInput, Network};
use super::{loss_and_grad, LossTarget};
use crate::Result;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn total_loss(net: &Network, input: NetInput, target: &LossTarget) -> Result<f64> {
    let out = net.forward(input)?;
    let (data_loss, _) = loss_and_grad(net.spec().loss, &out, target)?;
    Ok(data_loss + net.l1_penalty())
}

/// Compares analytic gradients against central finite differences at step
/// `eps` and returns the worst relative error over all parameters:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
///
/// Dropout is disabled for the probe (the check targets the deterministic
/// differentiable path).
pub fn gradient_check(net: &Network, input: NetInput, target: &LossTarget, eps: f64) -> Result<f64> {
    let mut probe = net.clone();
    {
        // strip dropout so +/- eps passes see the same function
        let spec = probe.spec().clone();
        let mut layers = spec.layers;
        for l in &mut layers {
            l.dropout_rate = 0.0;
        }
        probe = Network::from_parts(super::NetworkSpec { layers, loss: spec.loss }, probe.params().to_vec())?;
    }

    let mut rng = StdRng::seed_from_u64(0);
    let (out, cache) = probe.forward_train(input, &mut rng)?;
    let (_, dldy) = loss_and_grad(probe.spec().loss, &out, target)?;
    let (grads, _) = probe.backward(&cache, &dldy)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.blocks().into_iter().flatten().copied().collect::<Vec<_>>()).collect();

    let mut worst = 0.0f64;
    for i in 0..probe.param_count() {
        let original = *probe.param_mut(i);
        *probe.param_mut(i) = original + eps;
        let plus = total_loss(&probe, input, target)?;
        *probe.param_mut(i) = original - eps;
        let minus = total_loss(&probe, input, target)?;
        *probe.param_mut(i) = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerParams, LayerSpec, Loss, Mat, NetworkSpec};
    use rand::Rng;

    #[test]
    fn linear_mse_is_exact_up_to_roundoff() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::dense(3, 2, Activation::Identity), LayerSpec::dense(2, 1, Activation::Identity)],
            Loss::Mse,
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        let net = Network::init(spec, &mut rng).unwrap();
        let x = Mat::row_vec(vec![0.3, -0.7, 1.1]);
        let t = Mat::row_vec(vec![0.5]);
        let err = gradient_check(&net, NetInput::dense(&x), &LossTarget::Values(&t), 1e-5).unwrap();
        assert!(err < 1e-9, "linear net error {err}");
    }

    #[test]
    fn three_layer_leaky_relu_passes() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::dense(4, 8, Activation::LeakyRelu(0.2)),
                LayerSpec::dense(8, 6, Activation::LeakyRelu(0.2)),
                LayerSpec::dense(6, 2, Activation::Identity),
            ],
            Loss::Mse,
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        for probe in 0..10 {
            let net = Network::init(spec.clone(), &mut rng).unwrap();
            // offset inputs away from zero to dodge the leaky-relu kink
            let x = Mat::row_vec((0..4).map(|_| rng.gen_range(0.1..1.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect());
            let t = Mat::row_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let err = gradient_check(&net, NetInput::dense(&x), &LossTarget::Values(&t), 1e-5).unwrap();
            assert!(err < 1e-4, "probe {probe}: error {err}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let spec = NetworkSpec::new(vec![LayerSpec::dense(2, 1, Activation::Identity)], Loss::Mse).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let net = Network::init(spec, &mut rng).unwrap();
        let x = Mat::row_vec(vec![0.4, 0.9]);
        let t = Mat::row_vec(vec![1.0]);

        // Recompute the check by hand with the analytic gradient doubled: the
        // relative error |2a - n| / max(|2a|, |n|) lands near 0.5.
        let input = NetInput::dense(&x);
        let (out, cache) = net.forward_train(input, &mut rng).unwrap();
        let (_, dldy) = loss_and_grad(Loss::Mse, &out, &LossTarget::Values(&t)).unwrap();
        let (grads, _) = net.backward(&cache, &dldy).unwrap();
        let corrupted: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.blocks().into_iter().flatten().map(|v| 2.0 * v).collect::<Vec<_>>())
            .collect();
        let mut probe = net.clone();
        let mut worst = 0.0f64;
        for i in 0..probe.param_count() {
            let original = *probe.param_mut(i);
            *probe.param_mut(i) = original + 1e-5;
            let plus = total_loss(&probe, input, &LossTarget::Values(&t)).unwrap();
            *probe.param_mut(i) = original - 1e-5;
            let minus = total_loss(&probe, input, &LossTarget::Values(&t)).unwrap();
            *probe.param_mut(i) = original;
            let numeric = (plus - minus) / (2e-5);
            let denom = corrupted[i].abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((corrupted[i] - numeric).abs() / denom);
        }
        assert!((0.33..=1.0).contains(&worst), "corruption went undetected: {worst}");
    }

    #[test]
    fn l1_subgradient_contributes() {
        // single weight w = -5 with l1 = 0.1: gradient gains a -0.1 term
        let spec = NetworkSpec::new(vec![LayerSpec::dense_l1(1, 1, Activation::Identity, 0.1)], Loss::Mse).unwrap();
        let mut net = Network::init(spec, &mut StdRng::seed_from_u64(0)).unwrap();
        *net.param_mut(0) = -5.0;
        *net.param_mut(1) = 0.0;
        let x = Mat::row_vec(vec![3.0]);
        let (out, cache) = net.forward_train(NetInput::dense(&x), &mut StdRng::seed_from_u64(0)).unwrap();
        let t = Mat::row_vec(vec![0.0]);
        let (_, dldy) = loss_and_grad(Loss::Mse, &out, &LossTarget::Values(&t)).unwrap();
        let (grads, _) = net.backward(&cache, &dldy).unwrap();
        if let LayerParams::Dense { w, .. } = &grads[0] {
            // data term: 2*(w*x - 0)*x = 2*(-15)*3 = -90; l1 term: 0.1*sign(-5) = -0.1
            assert!((w.data[0] - (-90.0 - 0.1)).abs() < 1e-12, "grad {}", w.data[0]);
        } else {
            panic!("dense grads expected");
        }
        // and the finite-difference check still agrees because the loss
        // includes the penalty
        let err = gradient_check(&net, NetInput::dense(&x), &LossTarget::Values(&t), 1e-5).unwrap();
        assert!(err < 1e-6, "error {err}");
    }
}
