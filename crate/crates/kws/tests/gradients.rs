//! Finite-difference validation of every analytical backward pass, each over
//! 20 seeds: affine, convolution (params and input), gradient flow through
//! max-pooling and tanh, uni- and bidirectional LSTM, CTC loss through the
//! log-softmax, and the keyword loss through the full hypernetwork
//! composition (encoder -> filter -> convolution -> pooled activations).

mod common;

use common::{check_input, check_params, dot, projection, rel_err, H};
use kws::ctc::{ctc_loss, LogPosteriorgram};
use kws::keyword::{filter_logits, EncoderConfig, KeywordEncoder};
use kws::nn::{
    maxpool1d, maxpool1d_backward, sigmoid, softplus, tanh_seq, tanh_seq_backward, AffineLayer,
    Conv1dLayer, LstmLayer,
};
use kws::tensor::{FeatureSequence, PhoneSeq, Tensor};
use kws::trainer::kws_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-3;

fn random_seq(rng: &mut impl Rng, frames: usize, dim: usize) -> FeatureSequence {
    let data = (0..frames * dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
    FeatureSequence::from_vec(frames, dim, data).unwrap()
}

#[test]
fn affine_params_and_input() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = AffineLayer::new(5, 4, &mut rng);
        let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = projection(&mut rng, 4);

        let mut grads = layer.params.zeros_like();
        let dinput = layer.backward_into(&input, &w, &mut grads);
        let wc = w.clone();
        let ic = input.clone();
        let worst = check_params(
            &mut layer,
            |l| &mut l.params,
            &grads,
            move |l| dot(&wc, &l.forward(&ic).unwrap()),
            usize::MAX,
            &mut rng,
        );
        assert!(worst <= TOL, "affine params rel err {worst} (seed {seed})");

        for (i, &a) in dinput.iter().enumerate() {
            let mut x = input.clone();
            x[i] += H;
            let fp = dot(&w, &layer.forward(&x).unwrap());
            x[i] = input[i] - H;
            let fm = dot(&w, &layer.forward(&x).unwrap());
            let e = rel_err(a, (fp - fm) / (2.0 * H));
            assert!(e <= TOL, "affine input rel err {e} (seed {seed})");
        }
    }
}

#[test]
fn conv_params_and_input() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut layer = Conv1dLayer::new(3, 4, 3, &mut rng);
        let mut input = random_seq(&mut rng, 8, 4);
        let out = layer.forward(&input).unwrap();
        let w = projection(&mut rng, out.data().len());

        let upstream = FeatureSequence::from_vec(out.frames(), out.dim(), w.clone()).unwrap();
        let mut grads = layer.params.zeros_like();
        let dinput = layer
            .backward_into(&input, &upstream, &mut grads, true)
            .unwrap();

        let snapshot = input.clone();
        let mut worst = 0.0f64;
        for name in ["kernel", "bias"] {
            let len = layer.params.get(name).len();
            for i in 0..len {
                let orig = layer.params.get(name).data()[i];
                layer.params.get_mut(name).data_mut()[i] = orig + H;
                let fp = dot(&w, layer.forward(&snapshot).unwrap().data());
                layer.params.get_mut(name).data_mut()[i] = orig - H;
                let fm = dot(&w, layer.forward(&snapshot).unwrap().data());
                layer.params.get_mut(name).data_mut()[i] = orig;
                worst = worst.max(rel_err(grads.get(name).data()[i], (fp - fm) / (2.0 * H)));
            }
        }
        assert!(worst <= TOL, "conv params rel err {worst} (seed {seed})");

        let layer_ref = &layer;
        let winput = check_input(
            &mut input,
            &dinput,
            |x| dot(&w, layer_ref.forward(x).unwrap().data()),
            usize::MAX,
            &mut rng,
        );
        assert!(winput <= TOL, "conv input rel err {winput} (seed {seed})");
    }
}

/// Margin guard: finite differences through an argmax are only valid when no
/// pooling window can switch winners under a +-H nudge.
fn pool_margins_ok(input: &FeatureSequence, size: usize, stride: usize) -> bool {
    let t_out = (input.frames() - size) / stride + 1;
    for t in 0..t_out {
        for c in 0..input.dim() {
            let mut vals: Vec<f64> = (0..size).map(|dt| input.row(t * stride + dt)[c]).collect();
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if vals[0] - vals[1] < 1e-3 {
                return false;
            }
        }
    }
    true
}

#[test]
fn gradient_flows_through_pooling_and_tanh_into_conv() {
    let (size, stride) = (3, 2);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut layer = Conv1dLayer::new(3, 3, 2, &mut rng);
        let input = loop {
            let x = random_seq(&mut rng, 12, 3);
            let act = layer.forward(&x).unwrap();
            if pool_margins_ok(&act, size, stride) {
                break x;
            }
        };

        let act = layer.forward(&input).unwrap();
        let (pooled, cache) = maxpool1d(&act, size, stride).unwrap();
        let z = tanh_seq(&pooled);
        let w = projection(&mut rng, z.data().len());

        let dz = FeatureSequence::from_vec(z.frames(), z.dim(), w.clone()).unwrap();
        let dpooled = tanh_seq_backward(&z, &dz);
        let dact = maxpool1d_backward(&cache, &dpooled);
        let mut grads = layer.params.zeros_like();
        layer.backward_into(&input, &dact, &mut grads, false);

        let loss = |l: &Conv1dLayer| {
            let act = l.forward(&input).unwrap();
            let (pooled, _) = maxpool1d(&act, size, stride).unwrap();
            dot(&w, tanh_seq(&pooled).data())
        };
        let mut worst = 0.0f64;
        for name in ["kernel", "bias"] {
            let len = layer.params.get(name).len();
            for i in 0..len {
                let orig = layer.params.get(name).data()[i];
                layer.params.get_mut(name).data_mut()[i] = orig + H;
                let fp = loss(&layer);
                layer.params.get_mut(name).data_mut()[i] = orig - H;
                let fm = loss(&layer);
                layer.params.get_mut(name).data_mut()[i] = orig;
                worst = worst.max(rel_err(grads.get(name).data()[i], (fp - fm) / (2.0 * H)));
            }
        }
        assert!(worst <= TOL, "pool-through rel err {worst} (seed {seed})");
    }
}

#[test]
fn lstm_params_and_input() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut layer = LstmLayer::new(5, 4, &mut rng);
        let mut input = random_seq(&mut rng, 6, 5);
        let (out, cache) = layer.forward(&input).unwrap();
        let w = projection(&mut rng, out.data().len());

        let upstream = FeatureSequence::from_vec(out.frames(), out.dim(), w.clone()).unwrap();
        let mut grads = layer.params.zeros_like();
        let dinput = layer.backward_into(&input, &cache, &upstream, &mut grads);

        let snapshot = input.clone();
        let loss = |l: &LstmLayer| dot(&w, l.forward(&snapshot).unwrap().0.data());
        let mut worst = 0.0f64;
        for name in ["wx", "wh", "b"] {
            let len = layer.params.get(name).len();
            for i in 0..len {
                let orig = layer.params.get(name).data()[i];
                layer.params.get_mut(name).data_mut()[i] = orig + H;
                let fp = loss(&layer);
                layer.params.get_mut(name).data_mut()[i] = orig - H;
                let fm = loss(&layer);
                layer.params.get_mut(name).data_mut()[i] = orig;
                worst = worst.max(rel_err(grads.get(name).data()[i], (fp - fm) / (2.0 * H)));
            }
        }
        assert!(worst <= TOL, "lstm params rel err {worst} (seed {seed})");

        let layer_ref = &layer;
        let winput = check_input(
            &mut input,
            &dinput,
            |x| dot(&w, layer_ref.forward(x).unwrap().0.data()),
            usize::MAX,
            &mut rng,
        );
        assert!(winput <= TOL, "lstm input rel err {winput} (seed {seed})");
    }
}

#[test]
fn elementwise_sigmoid_softplus_tanh() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        for _ in 0..20 {
            let x: f64 = rng.gen_range(-4.0..4.0);
            let num_sig = (sigmoid(x + H) - sigmoid(x - H)) / (2.0 * H);
            let ana_sig = sigmoid(x) * (1.0 - sigmoid(x));
            assert!(rel_err(ana_sig, num_sig) <= TOL);

            let num_sp = (softplus(x + H) - softplus(x - H)) / (2.0 * H);
            assert!(rel_err(sigmoid(x), num_sp) <= TOL);

            let num_tanh = (f64::tanh(x + H) - f64::tanh(x - H)) / (2.0 * H);
            let ana_tanh = 1.0 - x.tanh() * x.tanh();
            assert!(rel_err(ana_tanh, num_tanh) <= TOL);
        }
    }
}

fn log_softmax_rows(logits: &[f64], frames: usize, labels: usize) -> LogPosteriorgram {
    let mut data = Vec::with_capacity(frames * labels);
    for t in 0..frames {
        let row = &logits[t * labels..(t + 1) * labels];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|v| v - lse));
    }
    LogPosteriorgram::new(frames, labels, data).unwrap()
}

#[test]
fn ctc_loss_through_log_softmax() {
    let (frames, labels) = (5usize, 4usize); // 3 phones + blank
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut logits: Vec<f64> = (0..frames * labels)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let target = PhoneSeq(vec![
            rng.gen_range(0..3),
            rng.gen_range(0..3),
        ]);

        let pg = log_softmax_rows(&logits, frames, labels);
        let (_, dlogp) = ctc_loss(&pg, &target).unwrap();
        // chain through log-softmax: dlogit_c = dlogp_c - p_c * sum(dlogp)
        let mut analytic = vec![0.0; frames * labels];
        for t in 0..frames {
            let dl = &dlogp[t * labels..(t + 1) * labels];
            let gsum: f64 = dl.iter().sum();
            for c in 0..labels {
                analytic[t * labels + c] = dl[c] - pg.logp(t, c as u32).exp() * gsum;
            }
        }

        let loss = |logits: &[f64]| {
            let pg = log_softmax_rows(logits, frames, labels);
            ctc_loss(&pg, &target).unwrap().0
        };
        for i in 0..logits.len() {
            let orig = logits[i];
            logits[i] = orig + H;
            let fp = loss(&logits);
            logits[i] = orig - H;
            let fm = loss(&logits);
            logits[i] = orig;
            let e = rel_err(analytic[i], (fp - fm) / (2.0 * H));
            assert!(e <= TOL, "ctc logit rel err {e} at {i} (seed {seed})");
        }
    }
}

/// The full training composition: keyword encoder (embedding + BiLSTM +
/// affine) predicts the filter, the filter convolves pooled tanh detector
/// activations, and the keyword loss scores the logit track. Checks encoder
/// and detector-convolution gradients jointly.
#[test]
fn kws_loss_through_hypernetwork_composition() {
    let config = EncoderConfig {
        phones: 6,
        embed_dim: 4,
        hidden: 5,
        top_kernel: 3,
        channels: 4,
    };
    let (pool, stride) = (2usize, 2usize);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut encoder = KeywordEncoder::new(config.clone(), &mut rng).unwrap();
        let mut conv1 = Conv1dLayer::new(2, 3, config.channels, &mut rng);
        let rec = loop {
            let x = random_seq(&mut rng, 14, 3);
            let act = conv1.forward(&x).unwrap();
            if pool_margins_ok(&act, pool, stride) {
                break x;
            }
        };
        let phones = PhoneSeq(vec![
            rng.gen_range(0..6),
            rng.gen_range(0..6),
            rng.gen_range(0..6),
        ]);

        let forward = |enc: &KeywordEncoder, conv: &Conv1dLayer| -> f64 {
            let act = conv.forward(&rec).unwrap();
            let (pooled, _) = maxpool1d(&act, pool, stride).unwrap();
            let z = tanh_seq(&pooled);
            let filter = enc.encode_keyword(&phones).unwrap();
            let logits = filter_logits(&filter.effective(), &z).unwrap();
            kws_loss(&logits, 1).0
        };

        // analytic gradients, assembled from the public backward passes plus
        // the convolution-by-filter chain written out longhand
        let act = conv1.forward(&rec).unwrap();
        let (pooled, pcache) = maxpool1d(&act, pool, stride).unwrap();
        let z = tanh_seq(&pooled);
        let (filter, ecache) = encoder.encode_with_cache(&phones).unwrap();
        let eff = filter.effective();
        let logits = filter_logits(&eff, &z).unwrap();
        let (_, dlogits) = kws_loss(&logits, 1);

        let (kt, ch) = (config.top_kernel, config.channels);
        let mut dfilter = Tensor::zeros(&[kt, ch]);
        let mut dz = FeatureSequence::zeros(z.frames(), z.dim());
        for (t, &g) in dlogits.iter().enumerate() {
            for j in 0..kt {
                for c in 0..ch {
                    dfilter.data_mut()[j * ch + c] += g * z.row(t + j)[c];
                    dz.row_mut(t + j)[c] += g * eff.data()[j * ch + c];
                }
            }
        }
        let mut egrads = encoder.zero_grads();
        encoder.encode_backward_into(&phones, &ecache, &dfilter, &mut egrads);
        let dpooled = tanh_seq_backward(&z, &dz);
        let dact = maxpool1d_backward(&pcache, &dpooled);
        let mut cgrads = conv1.params.zeros_like();
        conv1.backward_into(&rec, &dact, &mut cgrads, false);

        let mut worst = 0.0f64;
        // encoder parameter groups
        let groups: [(&str, fn(&mut KeywordEncoder) -> &mut kws::tensor::LayerParams); 4] = [
            ("embed", |e| &mut e.embed),
            ("fwd", |e| &mut e.fwd.params),
            ("bwd", |e| &mut e.bwd.params),
            ("affine", |e| &mut e.affine.params),
        ];
        let analytic = [&egrads.embed, &egrads.fwd, &egrads.bwd, &egrads.affine];
        for ((gname, get), ana) in groups.into_iter().zip(analytic) {
            let names: Vec<String> = get(&mut encoder).iter().map(|(n, _)| n.to_string()).collect();
            for name in &names {
                let len = get(&mut encoder).get(name).len();
                let idx = common::sampled_indices(len, 10, &mut rng);
                for i in idx {
                    let orig = get(&mut encoder).get(name).data()[i];
                    get(&mut encoder).get_mut(name).data_mut()[i] = orig + H;
                    let fp = forward(&encoder, &conv1);
                    get(&mut encoder).get_mut(name).data_mut()[i] = orig - H;
                    let fm = forward(&encoder, &conv1);
                    get(&mut encoder).get_mut(name).data_mut()[i] = orig;
                    let e = rel_err(ana.get(name).data()[i], (fp - fm) / (2.0 * H));
                    worst = worst.max(e);
                    assert!(
                        e <= TOL,
                        "encoder {gname}.{name}[{i}] rel err {e} (seed {seed})"
                    );
                }
            }
        }
        // detector convolution
        for name in ["kernel", "bias"] {
            let len = conv1.params.get(name).len();
            let idx = common::sampled_indices(len, 10, &mut rng);
            for i in idx {
                let orig = conv1.params.get(name).data()[i];
                conv1.params.get_mut(name).data_mut()[i] = orig + H;
                let fp = forward(&encoder, &conv1);
                conv1.params.get_mut(name).data_mut()[i] = orig - H;
                let fm = forward(&encoder, &conv1);
                conv1.params.get_mut(name).data_mut()[i] = orig;
                let e = rel_err(cgrads.get(name).data()[i], (fp - fm) / (2.0 * H));
                worst = worst.max(e);
                assert!(e <= TOL, "conv1 {name}[{i}] rel err {e} (seed {seed})");
            }
        }
        assert!(worst <= TOL);
    }
}
