//! Central finite-difference gradient verification.
//!
//! The checker re-evaluates a loss closure with individually perturbed
//! parameter elements and compares the two-sided difference quotient against
//! the gradients produced by [`Tape::backward`]. The numeric side never
//! touches the backward path, so it stands as an independent oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Relative-error denominators are floored here so that exact-zero gradients
/// compared against finite-difference noise (~1e-11) do not blow up the ratio.
const REL_ERR_FLOOR: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub comparisons: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare backward gradients of `loss_fn` against central finite differences
/// for every listed parameter. `loss_fn` must rebuild the loss from scratch on
/// the given tape and be deterministic across calls.
///
/// At most `limit_per_tensor` elements are probed per tensor (chosen with
/// `rng`); `None` probes every element. Returns (max relative error, number
/// of comparisons).
pub fn finite_difference_check<F>(
    params: &[&Tensor],
    step: f64,
    limit_per_tensor: Option<usize>,
    rng: &mut ChaCha8Rng,
    loss_fn: F,
) -> Result<(f64, usize)>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    // Analytic pass.
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = loss_fn(&tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    // Numeric pass, element by element.
    let mut max_err = 0.0f64;
    let mut comparisons = 0;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let indices: Vec<usize> = match limit_per_tensor {
            Some(limit) if limit < n => sample(rng, n, limit).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in indices {
            p.nudge(idx, step);
            let plus = loss_fn(&Tape::inference())?.item();
            p.nudge(idx, -2.0 * step);
            let minus = loss_fn(&Tape::inference())?.item();
            p.nudge(idx, step);
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(relative_error(analytic[pi][idx], numeric));
            comparisons += 1;
        }
    }
    Ok((max_err, comparisons))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::param(shape, values).expect("consistent shape")
}

fn positive_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    Tensor::param(shape, values).expect("consistent shape")
}

/// A scalar probe that exercises every component of a tensor: sum(tanh(x)).
/// tanh keeps the reduction non-linear so structural mistakes cannot cancel.
fn probe(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    tape.sum(&tape.tanh(x)?)
}

/// Run the finite-difference suite over every tensor op, each on at least
/// three input shapes, and report the worst relative error per op.
pub fn check_tensor_ops(seed: u64) -> Result<Vec<GradCheckReport>> {
    let step = 1e-5;
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut run = |name: &str,
                   params: Vec<Tensor>,
                   rng: &mut ChaCha8Rng,
                   f: Box<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>>|
     -> Result<()> {
        let refs: Vec<&Tensor> = params.iter().collect();
        let (err, count) = finite_difference_check(&refs, step, None, rng, |tape| f(tape, &params))?;
        match reports.iter_mut().find(|r: &&mut GradCheckReport| r.name == name) {
            Some(r) => {
                r.max_rel_error = r.max_rel_error.max(err);
                r.comparisons += count;
            }
            None => reports.push(GradCheckReport {
                name: name.to_string(),
                max_rel_error: err,
                comparisons: count,
            }),
        }
        Ok(())
    };

    let matmul_shapes = [((3, 4), (4, 2)), ((1, 5), (5, 1)), ((2, 2), (2, 6))];
    for ((m, k), (k2, n)) in matmul_shapes {
        let a = random_tensor(&[m, k], &mut rng);
        let b = random_tensor(&[k2, n], &mut rng);
        run("matmul", vec![a, b], &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.matmul(&ps[0], &ps[1])?)
        }))?;
    }

    for shape in [[2usize, 3], [4, 1], [3, 5]] {
        let x = random_tensor(&shape, &mut rng);
        run("transpose", vec![x], &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.transpose(&ps[0])?)
        }))?;
    }

    for (shape, target) in [(vec![6], vec![2, 3]), (vec![2, 2], vec![4]), (vec![3, 4], vec![4, 3])] {
        let x = random_tensor(&shape, &mut rng);
        run("reshape", vec![x], &mut rng, Box::new(move |tape, ps| {
            probe(tape, &tape.reshape(&ps[0], &target)?)
        }))?;
    }

    let concat_cases = [
        (vec![3], vec![2], 0usize),
        (vec![2, 3], vec![1, 3], 0),
        (vec![2, 2], vec![2, 4], 1),
    ];
    for (sa, sb, axis) in concat_cases {
        let a = random_tensor(&sa, &mut rng);
        let b = random_tensor(&sb, &mut rng);
        run("concat", vec![a, b], &mut rng, Box::new(move |tape, ps| {
            probe(tape, &tape.concat(&ps[0], &ps[1], axis)?)
        }))?;
    }

    for (count, width) in [(1usize, 4usize), (3, 2), (5, 3)] {
        let rows: Vec<Tensor> = (0..count).map(|_| random_tensor(&[width], &mut rng)).collect();
        run("stack_rows", rows, &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.stack_rows(ps)?)
        }))?;
    }

    for (shape, index) in [([3usize, 2], 1usize), ([1, 4], 0), ([5, 3], 4)] {
        let x = random_tensor(&shape, &mut rng);
        run("row", vec![x], &mut rng, Box::new(move |tape, ps| {
            probe(tape, &tape.row(&ps[0], index)?)
        }))?;
    }

    // Repeated ids exercise the scatter-add path.
    let lookup_cases: [(usize, usize, Vec<usize>); 3] =
        [(4, 3, vec![0, 2, 0, 0]), (2, 2, vec![1, 1]), (5, 2, vec![4, 3, 4])];
    for (v, e, ids) in lookup_cases {
        let table = random_tensor(&[v, e], &mut rng);
        run("embedding_lookup", vec![table], &mut rng, Box::new(move |tape, ps| {
            probe(tape, &tape.embedding_lookup(&ps[0], &ids)?)
        }))?;
    }

    for shape in [[1usize, 4], [3, 2], [5, 5]] {
        let x = random_tensor(&shape, &mut rng);
        run("average_pool", vec![x], &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.average_pool(&ps[0])?)
        }))?;
    }

    let softmax_cases = [(vec![4], 0usize), (vec![2, 3], 1), (vec![3, 2], 0)];
    for (shape, axis) in softmax_cases {
        let x = random_tensor(&shape, &mut rng);
        run("softmax", vec![x], &mut rng, Box::new(move |tape, ps| {
            probe(tape, &tape.softmax(&ps[0], axis)?)
        }))?;
    }

    for (n, d) in [(1usize, 3usize), (2, 4), (4, 2)] {
        let x = random_tensor(&[n, d], &mut rng);
        let gain = random_tensor(&[d], &mut rng);
        let bias = random_tensor(&[d], &mut rng);
        run("layer_norm", vec![x, gain, bias], &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.layer_norm(&ps[0], &ps[1], &ps[2], 1e-5)?)
        }))?;
    }

    for shape in [vec![3usize], vec![2, 2], vec![1, 6]] {
        let a = random_tensor(&shape, &mut rng);
        let b = random_tensor(&shape, &mut rng);
        run("add", vec![a, b], &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.add(&ps[0], &ps[1])?)
        }))?;
        let a = random_tensor(&shape, &mut rng);
        let b = random_tensor(&shape, &mut rng);
        run("mul", vec![a, b], &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.mul(&ps[0], &ps[1])?)
        }))?;
        let x = random_tensor(&shape, &mut rng);
        run("scale", vec![x], &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.scale(&ps[0], -1.7)?)
        }))?;
        let x = random_tensor(&shape, &mut rng);
        run("tanh", vec![x], &mut rng, Box::new(|tape, ps| {
            tape.sum(&tape.tanh(&ps[0])?)
        }))?;
        let x = random_tensor(&shape, &mut rng);
        run("sigmoid", vec![x], &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.sigmoid(&ps[0])?)
        }))?;
        let x = positive_tensor(&shape, &mut rng);
        run("ln", vec![x], &mut rng, Box::new(|tape, ps| {
            probe(tape, &tape.ln(&ps[0])?)
        }))?;
        let x = random_tensor(&shape, &mut rng);
        run("sum", vec![x], &mut rng, Box::new(|tape, ps| {
            tape.sum(&tape.mul(&ps[0], &ps[0])?)
        }))?;
        // Fixed dropout seed keeps the mask identical across probe evaluations.
        let x = random_tensor(&shape, &mut rng);
        run("dropout", vec![x], &mut rng, Box::new(|tape, ps| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            probe(tape, &tape.dropout(&ps[0], 0.4, true, &mut mask_rng)?)
        }))?;
    }

    for c in [2usize, 5, 7] {
        let logits = random_tensor(&[c], &mut rng);
        let class = c - 1;
        run("cross_entropy", vec![logits], &mut rng, Box::new(move |tape, ps| {
            let p = tape.softmax(&ps[0], 0)?;
            tape.cross_entropy(&p, class)
        }))?;
    }

    Ok(reports)
}

/// Whole-model spot check: random tiny model of the given variant, one
/// random example, classification loss (plus the hard-attention term where
/// the variant has one) against finite differences with step 1e-4.
pub fn check_model(variant: crate::model::ModelVariant, seed: u64) -> Result<GradCheckReport> {
    use crate::attention::hard_attention_loss;
    use crate::data::{gen_synthetic, SyntheticSpec, Vocabulary};
    use crate::model::{build_model, ForwardMode, ModelConfig};

    let spec = SyntheticSpec::demo(0.0, seed);
    let corpus = gen_synthetic(&spec, 20)?;
    let vocab = Vocabulary::build(&corpus, 1);
    let example = corpus.into_iter().next().expect("non-empty corpus");

    let mut config = ModelConfig::new(variant);
    config.embed_dim = 4;
    config.hidden_size = 2;
    config.heads = 2;
    config.layers = 2;
    config.dropout = 0.0;
    config.self_attention_hops = 2;
    config.self_attention_dim = 3;
    let model = build_model(config, vocab, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let refs: Vec<&Tensor> = model.parameters().iter().map(|(_, t)| t).collect();
    let class = (example.rating - 1) as usize;
    let (max_rel_error, comparisons) = finite_difference_check(&refs, 1e-4, Some(1), &mut rng, |tape| {
        let pass = model.forward(&example, tape, &mut ForwardMode::Eval)?;
        let mut loss = tape.cross_entropy(&pass.probabilities, class)?;
        if let Some(signal) = pass.hard_attention {
            let aux = hard_attention_loss(tape, &signal.weights, &signal.labels)?;
            loss = tape.add(&loss, &aux)?;
        }
        Ok(loss)
    })?;
    Ok(GradCheckReport { name: variant.tag().to_string(), max_rel_error, comparisons })
}

/// Spot-check every model variant.
pub fn check_all_models(seed: u64) -> Result<Vec<GradCheckReport>> {
    crate::model::ModelVariant::all()
        .into_iter()
        .map(|variant| check_model(variant, seed))
        .collect()
}
