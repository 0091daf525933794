//! Forward passes recomputed by hand from the raw parameter tensors and
//! compared with the library, plus the finite-difference gradient check.

mod common;

use ndp::data::{series_1d, Task, TaskSpec};
use ndp::diffcore::ParamStore;
use ndp::model::{ContextSet, LatentSample, Model, ModelSpec, Variant};

const TOL: f64 = 1e-12;

#[derive(Clone, Copy)]
enum Act {
    Relu,
    Tanh,
    Id,
}

fn layer(store: &ParamStore, name: &str, x: &[f64], act: Act) -> Vec<f64> {
    let w = store.get(store.id(&format!("{name}.weight")).unwrap_or_else(|| panic!("no {name}")));
    let b = store.get(store.id(&format!("{name}.bias")).unwrap());
    assert_eq!(w.cols(), x.len());
    (0..w.rows())
        .map(|o| {
            let mut z = b.data()[o];
            for (wi, xi) in w.row(o).iter().zip(x) {
                z += wi * xi;
            }
            match act {
                Act::Relu => z.max(0.0),
                Act::Tanh => z.tanh(),
                Act::Id => z,
            }
        })
        .collect()
}

/// `prefix.0 ... prefix.{n-1}` with `hidden` everywhere but the last layer.
fn mlp(store: &ParamStore, prefix: &str, n: usize, x: &[f64], hidden: Act, out: Act) -> Vec<f64> {
    let mut h = x.to_vec();
    for i in 0..n {
        h = layer(store, &format!("{prefix}.{i}"), &h, if i + 1 == n { out } else { hidden });
    }
    h
}

fn sigma(z: &[f64]) -> Vec<f64> {
    z.iter().map(|z| 0.1 + 0.9 / (1.0 + (-z).exp())).collect()
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.concat()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{what}[{i}]: {x} vs {y}");
    }
}

fn sine_context() -> ContextSet {
    let s = series_1d(&TaskSpec::new(Task::Sine, 0), 0.9, 0.4);
    ContextSet::from_series(&s, &[3, 41, 42, 88])
}

/// Encoder mean followed by the posterior heads.
fn posterior_oracle(model: &Model, ctx: &ContextSet) -> (Vec<f64>, [Vec<f64>; 4]) {
    let p = model.params();
    let n_enc = model.spec().encoder_hidden.len() + 1;
    let mut r = vec![0.0; model.spec().r_dim];
    for (t, y) in ctx.points() {
        let e = mlp(p, "encoder", n_enc, &cat(&[&[*t], y]), Act::Relu, Act::Id);
        for (a, v) in r.iter_mut().zip(e) {
            *a += v;
        }
    }
    r.iter_mut().for_each(|v| *v /= ctx.len() as f64);
    let h = layer(p, "to_hidden.0", &r, Act::Relu);
    let (m, s) = if model.spec().variant == Variant::Np {
        ("z_mean", "z_sigma")
    } else {
        ("control_mean", "control_sigma")
    };
    let heads = [
        layer(p, &format!("{m}.0"), &h, Act::Id),
        sigma(&layer(p, &format!("{s}.0"), &h, Act::Id)),
        if model.spec().variant == Variant::Np { vec![] } else { layer(p, "initial_mean.0", &h, Act::Id) },
        if model.spec().variant == Variant::Np {
            vec![]
        } else {
            sigma(&layer(p, "initial_sigma.0", &h, Act::Id))
        },
    ];
    (r, heads)
}

#[test]
fn encoder_and_posterior_heads_match_hand_computation() {
    let ctx = sine_context();
    for variant in Variant::ODE_VARIANTS.into_iter().chain([Variant::Np]) {
        let model = Model::new(ModelSpec::tiny(Task::Sine, variant), 5).unwrap();
        let (r, [cm, cs, im, is]) = posterior_oracle(&model, &ctx);
        assert_close(&model.encode_aggregate(&ctx).unwrap(), &r, TOL, "r");
        let post = model.infer_posterior(&ctx).unwrap();
        assert_close(&post.control.mu, &cm, TOL, "control mu");
        assert_close(&post.control.sigma, &cs, TOL, "control sigma");
        assert_close(&post.initial.mu, &im, TOL, "initial mu");
        assert_close(&post.initial.sigma, &is, TOL, "initial sigma");
    }
}

/// Hand-written latent derivative for every ODE variant.
fn derivative_oracle(model: &Model, l: &[f64], d: &[f64], t: f64) -> Vec<f64> {
    let spec = model.spec();
    let n = spec.ode_hidden.len() + 1;
    let out = mlp(model.params(), "ode", n, &cat(&[l, d, &[t]]), Act::Tanh, Act::Id);
    if spec.variant.is_second_order() {
        let half = spec.latent_dim / 2;
        cat(&[&l[half..], &out])
    } else {
        out
    }
}

fn decode_oracle(model: &Model, l: &[f64], d: &[f64], t: f64) -> Vec<f64> {
    let spec = model.spec();
    let p = model.params();
    match spec.variant {
        Variant::Np => mlp(p, "decoder", spec.decoder_hidden.len() + 1, &cat(&[&[t], d]), Act::Relu, Act::Id),
        Variant::NdpL => layer(p, "decoder_out.0", l, Act::Id),
        Variant::Nd2pL => layer(p, "decoder_out.0", &l[..spec.latent_dim / 2], Act::Id),
        Variant::Ndp | Variant::Nd2p => {
            let h = mlp(p, "decoder_h", spec.decoder_hidden.len(), &cat(&[l, d, &[t]]), Act::Relu, Act::Relu);
            layer(p, "decoder_out.0", &cat(&[l, &h]), Act::Id)
        }
    }
}

#[test]
fn latent_derivative_and_decoder_match_hand_computation() {
    for variant in Variant::ODE_VARIANTS {
        let mut spec = ModelSpec::tiny(Task::Sine, variant);
        spec.latent_dim = 4;
        let model = Model::new(spec, 8).unwrap();
        let l = [0.3, -0.7, 1.1, 0.05];
        let d = [0.2, -0.4, 0.9];
        for t in [0.0, 1.7, 4.2] {
            let got = model.latent_derivative(&l, &d, t).unwrap();
            assert_close(&got, &derivative_oracle(&model, &l, &d, t), TOL, "dl/dt");
            let dec = model.decode(&l, &d, t).unwrap();
            assert_close(&dec.mu, &decode_oracle(&model, &l, &d, t), TOL, "decoded mean");
            assert_eq!(dec.sigma, vec![0.1]);
        }
    }
    let np = Model::new(ModelSpec::tiny(Task::Sine, Variant::Np), 8).unwrap();
    let z = [0.5, -0.1, 0.3, 0.8];
    assert_close(&np.decode(&[], &z, 2.5).unwrap().mu, &decode_oracle(&np, &[], &z, 2.5), TOL, "np decode");
}

/// Independent RK4 on the solver lattice, decoded at every lattice time.
#[test]
fn trajectories_match_an_independent_rk4() {
    for variant in Variant::ODE_VARIANTS {
        let model = Model::new(ModelSpec::tiny(Task::Sine, variant), 13).unwrap();
        let spec = model.spec().clone();
        let latent = LatentSample {
            l0: vec![0.4, -0.2],
            d: vec![0.1, 0.6, -0.3],
        };
        let steps = 40;
        let times: Vec<f64> = (0..=steps).map(|k| spec.t0 + k as f64 * spec.step).collect();
        let got = model.predict_latents(std::slice::from_ref(&latent), &times).unwrap().remove(0);

        let f = |t: f64, l: &[f64]| derivative_oracle(&model, l, &latent.d, t);
        let axpy = |a: &[f64], b: &[f64], c: f64| a.iter().zip(b).map(|(x, y)| x + c * y).collect::<Vec<_>>();
        let h = spec.step;
        let mut l = latent.l0.clone();
        for (k, &t) in times.iter().enumerate() {
            let want = decode_oracle(&model, &l, &latent.d, t);
            assert_close(got.row(k), &want, 1e-10, &format!("{variant} at step {k}"));
            let k1 = f(t, &l);
            let k2 = f(t + h / 2.0, &axpy(&l, &k1, h / 2.0));
            let k3 = f(t + h / 2.0, &axpy(&l, &k2, h / 2.0));
            let k4 = f(t + h, &axpy(&l, &k3, h));
            l = (0..l.len())
                .map(|i| l[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect();
        }
    }
}

#[test]
fn finite_difference_gradients_agree() {
    let report = common::gradient_oracle_report().unwrap();
    assert!(report.failures.is_empty(), "{}", report.summary());
    assert!(report.checked.len() >= 27);
}
