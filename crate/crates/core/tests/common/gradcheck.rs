//! Central finite differences against the tape, for single primitives and
//! for whole parameter stores.

use abn_core::abn::{AbnModel, AbnModelRef};
use abn_core::data::Labels;
use abn_core::layers::{Mode, ParamStore, Session, BN_EPS};
use abn_core::tensor::{finite_diff_grad, relative_error, Graph, Tensor, Var};
use abn_core::train::combined_loss;

use super::{micro_spec, positive, rng, uniform, uniform_away_from_zero};

pub const EPS: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Var;
pub type Instance = (Vec<Tensor>, Box<Build>);

/// Contracts `f(inputs)` with a fixed random tensor so every output element
/// carries a distinct upstream gradient, then compares the gradient of each
/// input with finite differences. Returns the worst relative error.
pub fn check(inputs: &[Tensor], seed: u64, f: &Build) -> f64 {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        uniform(g.shape(out), &mut rng(seed ^ 0x5eed))
    };
    let loss_of = |values: &[Tensor], track: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vars);
        let loss = if g.value(out).is_scalar() {
            out
        } else {
            let w = g.constant(probe.clone());
            let prod = g.mul(out, w).expect("same shape");
            g.sum(prod)
        };
        (g, vars, loss)
    };

    let (mut g, vars, loss) = loss_of(inputs, true);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = finite_diff_grad(
            |t| {
                let mut values = inputs.to_vec();
                values[i] = t.clone();
                let (g, _, loss) = loss_of(&values, false);
                g.value(loss).item()
            },
            &inputs[i],
            EPS,
        );
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    worst
}

/// One primitive under test: `make(seed)` draws inputs and the function.
pub struct Case {
    pub family: &'static str,
    pub name: String,
    pub make: Box<dyn Fn(u64) -> Instance>,
}

impl Case {
    fn new(family: &'static str, name: impl Into<String>, make: impl Fn(u64) -> Instance + 'static) -> Self {
        Self {
            family,
            name: name.into(),
            make: Box::new(make),
        }
    }

    /// Worst relative error over [`SEEDS`], with the seed that produced it.
    pub fn worst(&self) -> (f64, u64) {
        SEEDS
            .iter()
            .map(|&seed| {
                let (inputs, f) = (self.make)(seed);
                (check(&inputs, seed, &*f), seed)
            })
            .fold((0.0, SEEDS[0]), |a, b| if b.0 > a.0 { b } else { a })
    }
}

fn boxed(f: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> Box<Build> {
    Box::new(f)
}

/// Every differentiable primitive of the tape, grouped by family.
pub fn primitive_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        cases.push(Case::new("conv2d", format!("conv2d stride {stride} pad {pad}"), move |seed| {
            let mut r = rng(seed);
            let inputs = vec![
                uniform(&[2, 3, 6, 5], &mut r),
                uniform(&[4, 3, 3, 3], &mut r),
                uniform(&[4], &mut r),
            ];
            (inputs, boxed(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()))
        }));
    }
    cases.push(Case::new("conv2d", "1x1 conv", |seed| {
        let mut r = rng(seed);
        let inputs = vec![uniform(&[2, 4, 3, 3], &mut r), uniform(&[3, 4, 1, 1], &mut r)];
        (inputs, boxed(|g, v| g.conv2d(v[0], v[1], None, 1, 0).unwrap()))
    }));
    cases.push(Case::new("linear", "linear", |seed| {
        let mut r = rng(seed);
        let inputs = vec![uniform(&[3, 5], &mut r), uniform(&[5, 4], &mut r), uniform(&[4], &mut r)];
        (inputs, boxed(|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()))
    }));
    cases.push(Case::new("gap", "global average pool", |seed| {
        let inputs = vec![uniform(&[2, 3, 4, 5], &mut rng(seed))];
        (inputs, boxed(|g, v| g.global_average_pool(v[0]).unwrap()))
    }));
    cases.push(Case::new("activation", "relu", |seed| {
        let inputs = vec![uniform_away_from_zero(&[3, 7], 1e-2, &mut rng(seed))];
        (inputs, boxed(|g, v| g.relu(v[0]).unwrap()))
    }));
    cases.push(Case::new("activation", "sigmoid", |seed| {
        let inputs = vec![uniform(&[2, 2, 3, 3], &mut rng(seed))];
        (inputs, boxed(|g, v| g.sigmoid(v[0]).unwrap()))
    }));
    cases.push(Case::new("activation", "softmax", |seed| {
        let inputs = vec![uniform(&[4, 5], &mut rng(seed))];
        (inputs, boxed(|g, v| g.softmax(v[0]).unwrap()))
    }));
    cases.push(Case::new("batch norm", "batch norm (train)", |seed| {
        let mut r = rng(seed);
        let inputs = vec![uniform(&[3, 2, 3, 3], &mut r), uniform(&[2], &mut r), uniform(&[2], &mut r)];
        (inputs, boxed(|g, v| g.batch_norm_train(v[0], v[1], v[2], BN_EPS).unwrap().0))
    }));
    cases.push(Case::new("batch norm", "batch norm (eval)", |seed| {
        let mut r = rng(seed);
        let inputs = vec![uniform(&[2, 3, 2, 2], &mut r), uniform(&[3], &mut r), uniform(&[3], &mut r)];
        (
            inputs,
            boxed(|g, v| {
                g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], BN_EPS)
                    .unwrap()
            }),
        )
    }));
    for (name, other) in [
        ("add", [2, 3, 2, 2]),
        ("mul", [2, 3, 2, 2]),
        ("broadcast add", [2, 1, 2, 2]),
        ("broadcast mul", [2, 1, 2, 2]),
    ] {
        let is_mul = name.ends_with("mul");
        cases.push(Case::new("elementwise", name, move |seed| {
            let mut r = rng(seed);
            let inputs = vec![uniform(&[2, 3, 2, 2], &mut r), uniform(&other, &mut r)];
            let f = if is_mul {
                boxed(|g, v| g.mul(v[0], v[1]).unwrap())
            } else {
                boxed(|g, v| g.add(v[0], v[1]).unwrap())
            };
            (inputs, f)
        }));
    }
    cases.push(Case::new("elementwise", "add scalar, scale, reshape", |seed| {
        let inputs = vec![uniform(&[2, 3, 2], &mut rng(seed))];
        (
            inputs,
            boxed(|g, v| {
                let a = g.add_scalar(v[0], 1.0);
                let b = g.scale(a, -2.5);
                g.reshape(b, &[6, 2]).unwrap()
            }),
        )
    }));
    cases.push(Case::new("elementwise", "fan-out", |seed| {
        // x feeds several consumers; the tape must sum their contributions.
        let inputs = vec![uniform(&[2, 2, 3, 3], &mut rng(seed))];
        (
            inputs,
            boxed(|g, v| {
                let s = g.sigmoid(v[0]).unwrap();
                let m = g.mul(v[0], s).unwrap();
                g.add(m, v[0]).unwrap()
            }),
        )
    }));
    cases.push(Case::new("loss", "cross entropy", |seed| {
        let inputs = vec![positive(&[4, 3], &mut rng(seed))];
        (inputs, boxed(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()))
    }));
    cases.push(Case::new("loss", "softmax cross entropy", |seed| {
        let inputs = vec![uniform(&[4, 3], &mut rng(seed))];
        (
            inputs,
            boxed(|g, v| {
                let p = g.softmax(v[0]).unwrap();
                g.cross_entropy(p, &[2, 0, 1, 1]).unwrap()
            }),
        )
    }));
    cases.push(Case::new("loss", "binary cross entropy", |seed| {
        let inputs = vec![positive(&[3, 4], &mut rng(seed))];
        (
            inputs,
            boxed(|g, v| {
                let targets = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0];
                g.binary_cross_entropy(v[0], &targets).unwrap()
            }),
        )
    }));
    cases.push(Case::new("selection", "select channel", |seed| {
        let inputs = vec![uniform(&[2, 3, 2, 2], &mut rng(seed))];
        (inputs, boxed(|g, v| g.select_channel(v[0], 1).unwrap()))
    }));
    cases.push(Case::new("selection", "slice cols + stack", |seed| {
        let mut r = rng(seed);
        let inputs = vec![uniform(&[3, 6], &mut r), uniform(&[3, 2], &mut r)];
        (
            inputs,
            boxed(|g, v| {
                let a = g.slice_cols(v[0], 2, 2).unwrap();
                let b = g.slice_cols(v[0], 4, 2).unwrap();
                g.stack(&[a, v[1], b]).unwrap()
            }),
        )
    }));
    cases
}

/// Outcome of comparing a store's analytic gradients with finite differences.
pub struct StoreCheck {
    /// Worst per-tensor relative error against central differences.
    pub worst: f64,
    /// Some probe straddled a non-differentiable point (a ReLU switching
    /// sign): the one-sided differences disagree, so the central difference
    /// is not a valid oracle for this instance.
    pub kinked: bool,
}

/// The gap between forward and backward differences is `h * f''` for a
/// smooth function, so it halves with the step. A kink inside the probe adds
/// a jump that does not scale; a deviation above this marks one.
pub const KINK_GAP: f64 = 1e-5;

pub type LossFn<'a> = dyn Fn(&mut ParamStore) -> (f64, Vec<(usize, Vec<f64>)>) + 'a;

/// Gradient of a scalar loss with respect to every trainable tensor of a
/// store, analytic versus finite differences.
pub fn store_check(store: &ParamStore, loss: &LossFn) -> StoreCheck {
    let mut work = store.clone();
    let (base, grads) = loss(&mut work);
    let mut out = StoreCheck {
        worst: 0.0,
        kinked: false,
    };
    for id in store.trainable().collect::<Vec<_>>() {
        let analytic = grads
            .iter()
            .find(|(i, _)| *i == id.index())
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let at = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                loss(&mut s).0
            };
            let gap = |h: f64| (at(h) - base) / h - (base - at(-h)) / h;
            let (plus, minus) = (at(EPS), at(-EPS));
            if (gap(EPS) - 2.0 * gap(EPS / 2.0)).abs() > KINK_GAP {
                out.kinked = true;
            }
            numeric.push((plus - minus) / (2.0 * EPS));
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err.is_finite(), "{}", store.entry(id).name);
        out.worst = out.worst.max(err);
    }
    out
}

pub fn session_loss(
    params: &mut ParamStore,
    forward: impl FnOnce(&mut Session) -> Var,
) -> (f64, Vec<(usize, Vec<f64>)>) {
    let mut s = Session::new(params, Mode::Train);
    let loss = forward(&mut s);
    s.backward(loss).unwrap();
    let value = s.value(loss).item();
    let grads = s
        .take_param_grads()
        .into_iter()
        .filter_map(|(id, g)| g.map(|g| (id.index(), g)))
        .collect();
    (value, grads)
}

pub fn micro_model_check(model: &AbnModel, x: &Tensor, labels: &Labels) -> StoreCheck {
    let spec = model.spec;
    let net = model.net.clone();
    store_check(&model.params, &|params| {
        session_loss(params, |s| {
            let input = s.input(x.clone());
            let view = AbnModelRef { spec, net: &net };
            let out = view.forward(s, input).unwrap();
            combined_loss(&mut s.graph, &spec, &out, labels).unwrap().total
        })
    })
}

/// Full-model checks over random instances. An instance whose probes
/// straddle a ReLU switch has no valid central-difference oracle and is
/// replaced by the next seed. Returns `(seed, worst error)` for the first
/// `SEEDS.len()` kink-free instances, or the seeds tried if too few were.
pub fn kink_free_instances(mut instance: impl FnMut(u64) -> StoreCheck) -> Result<Vec<(u64, f64)>, u64> {
    let mut accepted = Vec::new();
    for seed in 1..=40 {
        let check = instance(seed);
        if !check.kinked {
            accepted.push((seed, check.worst));
            if accepted.len() == SEEDS.len() {
                return Ok(accepted);
            }
        }
    }
    Err(40)
}

/// The two-class micro ABN on a fixed batch of four 8×8 inputs.
pub fn micro_abn_instance(seed: u64) -> StoreCheck {
    let model = AbnModel::build(micro_spec(), seed).unwrap();
    let x = uniform(&[4, 2, 8, 8], &mut rng(seed));
    let labels = Labels::Classes {
        num_classes: 2,
        labels: vec![0, 1, 1, 0],
    };
    micro_model_check(&model, &x, &labels)
}

/// Three-task micro ABN on three 8×8 inputs.
pub fn micro_multitask_instance(seed: u64) -> StoreCheck {
    let model = AbnModel::build(micro_spec().with_tasks(3), seed).unwrap();
    let x = uniform(&[3, 2, 8, 8], &mut rng(seed));
    let labels = Labels::Attributes {
        tasks: 3,
        values: vec![1, 0, 1, 0, 0, 1, 1, 1, 0],
    };
    micro_model_check(&model, &x, &labels)
}
