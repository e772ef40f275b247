//! The registration U-Net in analog (ReLU) and spiking (LIF) flavours.
//!
//! Both flavours share one layer graph: a full-resolution stem and first
//! encoder level, stride-2 encoder levels, a bottleneck, a decoder that
//! upsamples by nearest neighbour and concatenates encoder skips, and a
//! 1x1x1 head. Every block is conv -> BN -> ReLU or LIF. Spiking blocks pass
//! mean-rate tensors forward; the spiking head ends with a learnable
//! depthwise smoothing kernel.

mod checkpoint;
mod net;
mod spec;

pub use checkpoint::{Checkpoint, CheckpointMeta, MAGIC};
pub use net::{
    head_smoothing, layer_taus, uniform_kernel, ActivationSummary, Bound, ForwardConfig, ForwardOutput, LayerStat,
    Network, BN_EPS, BN_MOMENTUM, DEFAULT_THETA,
};
pub use spec::{Downsample, Flavor, HeadSmoothing, LayerInfo, LayerKind, NetworkSpec, OutputMode, Upsample};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::Volume;
    use crate::lif::SpikeMode;
    use crate::tensor::{BnMode, Precision, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> NetworkSpec {
        NetworkSpec {
            encoder_channels: vec![4, 8],
            decoder_channels: vec![4, 4],
            ..NetworkSpec::default()
        }
    }

    fn noise(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn flavours_share_conv_shapes() {
        let ann = Network::build(&toy(), Flavor::Ann, 1).unwrap();
        let snn = Network::build(&toy(), Flavor::Snn, 1).unwrap();
        for (k, t) in ann.params() {
            assert_eq!(snn.param(k).unwrap().shape(), t.shape(), "{k}");
        }
        assert_eq!(ann.num_params(), toy().param_count(Flavor::Ann));
        assert_eq!(snn.num_params(), toy().param_count(Flavor::Snn));
    }

    #[test]
    fn zero_weights_give_zero_field() {
        let mut net = Network::build(&toy(), Flavor::Ann, 2).unwrap();
        let names: Vec<String> = net.params().keys().cloned().collect();
        for n in names {
            if n.ends_with("weight") || n.ends_with("bias") || n.ends_with("beta") {
                let t = net.param_mut(&n).unwrap();
                *t = Tensor::zeros(t.shape());
            }
        }
        let (u, _) = net.register(&noise([4, 4, 4], 1), &noise([4, 4, 4], 2), Precision::Double).unwrap();
        assert_eq!(u.tensor().max_abs(), 0.0);
    }

    #[test]
    fn silent_snn_field_is_the_head_bias() {
        let mut net = Network::build(&toy(), Flavor::Snn, 3).unwrap();
        for l in toy().spiking_layers() {
            *net.param_mut(&format!("{l}.theta")).unwrap() = Tensor::scalar(f64::INFINITY);
        }
        *net.param_mut("head.bias").unwrap() = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let (u, stats) = net.register(&noise([4, 4, 4], 1), &noise([4, 4, 4], 2), Precision::Double).unwrap();
        assert!(stats.iter().all(|s| s.spike_count == Some(0)));
        for (c, b) in [0.5, -1.0, 2.0].iter().enumerate() {
            assert!(u.tensor().channel(c).iter().all(|v| (v - b).abs() < 1e-12));
        }
    }

    #[test]
    fn single_timestep_rate_equals_spikes() {
        let spec = NetworkSpec { timesteps: 1, ..toy() };
        let net = Network::build(&spec, Flavor::Snn, 4).unwrap();
        let mut tape = Tape::inference(Precision::Double);
        let b = net.bind(&mut tape, |_| false);
        let f = tape.constant(noise([4, 4, 4], 5).into_tensor());
        let m = tape.constant(noise([4, 4, 4], 6).into_tensor());
        let out = net.forward(&mut tape, &b, f, m, &ForwardConfig::inference()).unwrap();
        for (s, &y) in out.layers.iter().zip(&out.block_outputs) {
            let rate = tape.value(y);
            assert!(rate.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(rate.sum() as u64, s.spike_count.unwrap());
        }
    }

    #[test]
    fn hooks_count_equals_rate_times_t_times_n() {
        let net = Network::build(&toy(), Flavor::Snn, 7).unwrap();
        let (_, stats) = net.register(&noise([4, 4, 4], 8), &noise([4, 4, 4], 9), Precision::Double).unwrap();
        assert_eq!(stats.len(), toy().spiking_layers().len());
        for s in stats {
            let c = s.spike_count.unwrap() as f64;
            assert_eq!(c, s.rate.unwrap() * (s.timesteps * s.neurons) as f64, "{}", s.name);
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let net = Network::build(&toy(), Flavor::Snn, 10).unwrap();
        let (f, m) = (noise([4, 4, 4], 1), noise([4, 4, 4], 2));
        let a = net.register(&f, &m, Precision::Single).unwrap();
        let b = net.register(&f, &m, Precision::Single).unwrap();
        assert_eq!(a.0, b.0);
        assert!(net.register(&noise([5, 4, 4], 1), &noise([5, 4, 4], 2), Precision::Double).is_err());
        assert!(net.register(&noise([4, 4, 4], 1), &noise([4, 4, 2], 2), Precision::Double).is_err());
    }

    #[test]
    fn train_mode_reports_bn_updates() {
        let net = Network::build(&toy(), Flavor::Ann, 11).unwrap();
        let mut tape = Tape::new(Precision::Double);
        let b = net.bind(&mut tape, |_| true);
        let f = tape.constant(noise([4, 4, 4], 1).into_tensor());
        let m = tape.constant(noise([4, 4, 4], 2).into_tensor());
        let cfg = ForwardConfig {
            bn: BnMode::Train,
            spike_mode: SpikeMode::Binary,
            keep_activations: true,
        };
        let out = net.forward(&mut tape, &b, f, m, &cfg).unwrap();
        assert_eq!(out.bn_updates.len(), toy().spiking_layers().len());
        assert!(out.layers.iter().all(|s| s.activation_summary.is_some() && !s.positive.is_empty()));
        let loss = tape.mean(out.field).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(b.vars["stem.weight"]).is_some());
    }

    #[test]
    fn smoothing_examples() {
        let cst = Tensor::full(&[3, 4, 4, 4], 1.5);
        let k = uniform_kernel(3, 3);
        let out = head_smoothing(&cst, Some(&k)).unwrap();
        assert!(out.tensor().data().iter().all(|v| (v - 1.5).abs() < 1e-14));
        assert_eq!(head_smoothing(&cst, None).unwrap().tensor(), &cst);
        let delta = Tensor::from_voxels(3, [5, 5, 5], |_, z, y, x| if (z, y, x) == (2, 2, 2) { 27.0 } else { 0.0 });
        let out = head_smoothing(&delta, Some(&k)).unwrap();
        let expect = Tensor::from_voxels(3, [5, 5, 5], |_, z, y, x| {
            if (1..=3).contains(&z) && (1..=3).contains(&y) && (1..=3).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        assert!(out.tensor().max_abs_diff(&expect) < 1e-14);
        assert!(head_smoothing(&cst, Some(&Tensor::zeros(&[3, 1, 2, 2, 2]))).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::build(&toy(), Flavor::Snn, 12).unwrap();
        let ck = Checkpoint::from_network(&net, "snn_scratch", 12);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let net2 = back.to_network().unwrap();
        assert_eq!(net2, net);
        let (f, m) = (noise([4, 4, 4], 1), noise([4, 4, 4], 2));
        assert_eq!(
            net.register(&f, &m, Precision::Single).unwrap().0,
            net2.register(&f, &m, Precision::Single).unwrap().0
        );
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());

        let mut tampered = ck.clone();
        tampered.meta.spec.timesteps = 9;
        assert!(Checkpoint::from_bytes(&tampered.to_bytes().unwrap()).is_err());

        let mut wrong = ck;
        wrong.tensors.insert("enc1.weight".into(), Tensor::zeros(&[1, 1, 3, 3, 3]));
        assert!(wrong.to_network().is_err());
    }
}
