#![allow(dead_code)]

use nartlab::data::{generate_synthetic, EncodedCorpus, SyntheticTaskSpec, Vocabulary};
use nartlab::eval::bleu;
use nartlab::inference::{default_length_bias_encoded, translate, InferenceConfig};
use nartlab::losses::{align_loss, hid_loss, l2_hidden_loss, nll_loss, HintConfig};
use nartlab::nn::{Dropout, FeedForward, LayerNorm, ModelConfig, MultiHeadAttention};
use nartlab::rng::{stream, Purpose};
use nartlab::student::SoftCopyConfig;
use nartlab::tensor::{Graph, Grads, NdArray, ParamStore, Var};
use nartlab::train::{distill_corpus, AblationMode, StudentTrainer, TeacherTrainer, TrainConfig};
use nartlab::{Student, Teacher};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub coords: usize,
    pub rel_err: f64,
}

/// Compares backprop against central differences on sampled coordinates of
/// every parameter tensor. The error is `‖a − n‖ / max(‖a‖, ‖n‖)` over the
/// sampled coordinates.
pub fn check_params<M>(
    name: &str,
    model: &mut M,
    store_of: fn(&mut M) -> &mut ParamStore,
    loss: &dyn Fn(&M) -> (Graph, Var),
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let (mut g, v) = loss(model);
    g.backward(v).unwrap();
    let store = store_of(model);
    let mut grads = Grads::zeros_like(store);
    grads.absorb(&g);
    let mut picks = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        if n <= per_tensor {
            picks.extend((0..n).map(|k| (id, k)));
        } else {
            picks.extend((0..per_tensor).map(|_| (id, rng.gen_range(0..n))));
        }
    }
    let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
    for &(id, k) in &picks {
        let a = grads.get(id).data()[k];
        let orig = store_of(model).get(id).data()[k];
        store_of(model).get_mut(id).data_mut()[k] = orig + FD_STEP;
        let (g1, v1) = loss(model);
        store_of(model).get_mut(id).data_mut()[k] = orig - FD_STEP;
        let (g2, v2) = loss(model);
        store_of(model).get_mut(id).data_mut()[k] = orig;
        let n = (g1.value(v1).item() - g2.value(v2).item()) / (2.0 * FD_STEP);
        diff += (a - n) * (a - n);
        an += a * a;
        nu += n * n;
    }
    let scale = an.sqrt().max(nu.sqrt()).max(1e-12);
    GradCheck {
        name: name.to_owned(),
        coords: picks.len(),
        rel_err: diff.sqrt() / scale,
    }
}

fn store_itself(s: &mut ParamStore) -> &mut ParamStore {
    s
}

fn teacher_store(t: &mut Teacher) -> &mut ParamStore {
    t.params_mut()
}

fn student_store(s: &mut Student) -> &mut ParamStore {
    s.params_mut()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> NdArray {
    let n: usize = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Scalar `Σ out ⊙ r` with a fixed random `r`.
fn project(g: &mut Graph, out: Var, r: &NdArray) -> Var {
    let rv = g.constant(r.clone()).unwrap();
    let p = g.mul(out, rv).unwrap();
    g.sum(p).unwrap()
}

fn cosines(h: &NdArray) -> Vec<f64> {
    let t = h.rows();
    let mut out = Vec::new();
    for i in 0..t {
        for j in i + 1..t {
            out.push(nartlab::losses::cosine(h.row(i), h.row(j)));
        }
    }
    out
}

/// Closest distance of any student/teacher pair cosine to a hint threshold.
fn threshold_margin(student: &[NdArray], teacher: &NdArray, cfg: &HintConfig) -> f64 {
    let mut m = f64::INFINITY;
    for (l, s) in student.iter().enumerate() {
        for c in cosines(s) {
            m = m.min((c - cfg.gamma_st).abs());
        }
        for c in cosines(&teacher.slice_first(l)) {
            m = m.min((c - cfg.gamma_tr).abs());
        }
    }
    m
}

/// Architecture of gradient-check configuration `i`.
pub fn check_config(i: usize) -> ModelConfig {
    let d = [8, 16][i % 2];
    let heads = [1, 2][(i / 2) % 2];
    let layers = [1, 2][(i / 4) % 2];
    ModelConfig::new(layers, layers, heads, d, 2 * d, 11, 11, 12)
}

fn sentence(rng: &mut ChaCha8Rng, vocab: usize, lo: usize, hi: usize) -> Vec<usize> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| rng.gen_range(4..vocab)).collect()
}

/// All checks for one seed: each network block, each loss term on free
/// inputs, and the full teacher and student objectives.
pub fn gradient_suite(seed: u64) -> Vec<GradCheck> {
    let cfg = check_config(seed as usize);
    let mut rng = stream(seed, Purpose::Check, 0);
    let mut out = Vec::new();
    let (d, h, n) = (cfg.d_model, cfg.heads, cfg.dec_layers);
    let tag = |s: &str| format!("{s} (seed {seed}, d={d}, H={h}, N={n})");

    // Attention: causal self, padded cross, positional.
    {
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "attn", &cfg, &mut rng);
        let (tq, tk) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let q = store.add("q", random(&mut rng, &[tq, d], 1.0));
        let kv = store.add("kv", random(&mut rng, &[tk, d], 1.0));
        let r = random(&mut rng, &[tq, d], 1.0);
        let self_mask = nartlab::nn::attention_mask(tq, tq, true, None).unwrap();
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let qv = g.param(s, q);
            let (o, _) = attn.forward(&mut g, s, qv, qv, qv, self_mask.as_deref(), &mut Dropout::off()).unwrap();
            let v = project(&mut g, o, &r);
            (g, v)
        };
        out.push(check_params(&tag("causal self-attention"), &mut store, store_itself, &f, 4, &mut rng));

        let mut pad = vec![false; tk];
        pad[tk - 1] = true;
        let cross_mask = nartlab::nn::attention_mask(tq, tk, false, Some(&pad)).unwrap();
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let (qv, kvv) = (g.param(s, q), g.param(s, kv));
            let (o, _) = attn.forward(&mut g, s, qv, kvv, kvv, cross_mask.as_deref(), &mut Dropout::off()).unwrap();
            let v = project(&mut g, o, &r);
            (g, v)
        };
        out.push(check_params(&tag("cross-attention with padding"), &mut store, store_itself, &f, 4, &mut rng));

        let pe = nartlab::nn::positional_encoding(tq, d);
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let qv = g.param(s, q);
            let pv = g.constant(pe.clone()).unwrap();
            let (o, _) = attn.forward(&mut g, s, pv, pv, qv, None, &mut Dropout::off()).unwrap();
            let v = project(&mut g, o, &r);
            (g, v)
        };
        out.push(check_params(&tag("positional attention"), &mut store, store_itself, &f, 4, &mut rng));
    }

    // Feed-forward inside a normalized residual.
    {
        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "ffn", &cfg, &mut rng);
        let norm = LayerNorm::new(&mut store, "norm", d);
        let t = rng.gen_range(2..6);
        let x = store.add("x", random(&mut rng, &[t, d], 1.0));
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("norm") {
                let shape = store.get(id).shape().to_vec();
                let base = if store.name(id).ends_with("gain") { 1.0 } else { 0.0 };
                *store.get_mut(id) = random(&mut rng, &shape, 0.3).map(|v| v + base);
            }
        }
        let r = random(&mut rng, &[t, d], 1.0);
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let xv = g.param(s, x);
            let y = ffn.forward(&mut g, s, xv, &mut Dropout::off()).unwrap();
            let z = norm.residual(&mut g, s, xv, y, &mut Dropout::off()).unwrap();
            let v = project(&mut g, z, &r);
            (g, v)
        };
        out.push(check_params(&tag("feed-forward and layer norm"), &mut store, store_itself, &f, 4, &mut rng));
    }

    // Loss terms on free inputs.
    let hint = HintConfig::default();
    {
        let mut store = ParamStore::new();
        let t = rng.gen_range(2..7);
        let logits = store.add("logits", random(&mut rng, &[t, 9], 2.0));
        let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(1..9)).collect();
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let l = g.param(s, logits);
            let v = nll_loss(&mut g, l, &targets, hint.label_smoothing).unwrap();
            (g, v)
        };
        out.push(check_params(&tag("smoothed nll"), &mut store, store_itself, &f, 64, &mut rng));
    }
    {
        // Student states share a random direction so that many pairs sit in
        // the active region; redraw until no pair is near a threshold.
        let t = rng.gen_range(3..7);
        let (student, teacher) = loop {
            let shared = random(&mut rng, &[1, d], 1.0);
            let student: Vec<NdArray> = (0..n)
                .map(|_| {
                    let mut s = random(&mut rng, &[t, d], 1.0);
                    for i in 0..t {
                        for (v, b) in s.row_mut(i).iter_mut().zip(shared.row(0)) {
                            *v += b;
                        }
                    }
                    s
                })
                .collect();
            let teacher = random(&mut rng, &[n, t, d], 1.0);
            if threshold_margin(&student, &teacher, &hint) > 1e-3 {
                break (student, teacher);
            }
        };
        let mut store = ParamStore::new();
        let ids: Vec<_> = student.into_iter().enumerate().map(|(l, s)| store.add(format!("h{l}"), s)).collect();
        let active = {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&i| g.param(&store, i)).collect();
            let v = hid_loss(&mut g, &vars, &teacher, &hint).unwrap();
            g.value(v).item()
        };
        assert!(active > 0.0, "hidden-state check has no active pair");
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&i| g.param(s, i)).collect();
            let v = hid_loss(&mut g, &vars, &teacher, &hint).unwrap();
            (g, v)
        };
        out.push(check_params(&tag("hidden-state hint"), &mut store, store_itself, &f, 64, &mut rng));
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&i| g.param(s, i)).collect();
            let v = l2_hidden_loss(&mut g, &vars, &teacher).unwrap();
            (g, v)
        };
        out.push(check_params(&tag("l2 hidden control"), &mut store, store_itself, &f, 64, &mut rng));
    }
    {
        let (ty, tx) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let mut store = ParamStore::new();
        let mut ids = Vec::new();
        for l in 0..n {
            let mut row = Vec::new();
            for k in 0..h {
                let mut s = random(&mut rng, &[ty, tx], 2.0);
                if (l + k) % 2 == 1 {
                    // Drive one entry below the floor.
                    s.set(&[0, 0], -40.0);
                }
                row.push(store.add(format!("a{l}.{k}"), s));
            }
            ids.push(row);
        }
        let teacher = {
            let mut g = Graph::new();
            let heads = (0..n * h)
                .map(|_| {
                    let v = g.constant(random(&mut rng, &[ty, tx], 2.0)).unwrap();
                    let sm = g.softmax(v, None).unwrap();
                    g.value(sm).clone()
                })
                .collect::<Vec<_>>();
            NdArray::new(vec![n, h, ty, tx], heads.iter().flat_map(|a| a.data().to_vec()).collect()).unwrap()
        };
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let vars: Vec<Vec<Var>> = ids
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&i| {
                            let p = g.param(s, i);
                            g.softmax(p, None).unwrap()
                        })
                        .collect()
                })
                .collect();
            let v = align_loss(&mut g, &vars, &teacher).unwrap();
            (g, v)
        };
        out.push(check_params(&tag("alignment hint"), &mut store, store_itself, &f, 64, &mut rng));
    }

    // Full teacher objective, with a fixed dropout mask on odd seeds.
    let mut teacher = Teacher::new(cfg.clone(), seed).unwrap();
    let src = {
        let mut s = sentence(&mut rng, cfg.src_vocab, 2, 6);
        if seed.is_multiple_of(3) {
            s.push(nartlab::nn::special::PAD);
        }
        s
    };
    let tgt = sentence(&mut rng, cfg.tgt_vocab, 2, 6);
    let dropout = if seed % 2 == 1 { 0.1 } else { 0.0 };
    let f = |t: &Teacher| {
        let mut g = Graph::new();
        let mut drop = Dropout::new(dropout, stream(seed, Purpose::Dropout, 0));
        let vars = t.forward_graph(&mut g, &src, &tgt, &mut drop).unwrap();
        let v = nll_loss(&mut g, vars.logits, &tgt, hint.label_smoothing).unwrap();
        (g, v)
    };
    out.push(check_params(&tag("teacher objective"), &mut teacher, teacher_store, &f, 3, &mut rng));

    // Full student objective against that teacher's trace.
    let mut student = Student::new(cfg.clone(), SoftCopyConfig::default(), seed + 100).unwrap();
    let trace = loop {
        let tr = teacher.forced_decode(&src, &tgt).unwrap();
        let st = student.parallel_decode_forward(&src, tgt.len()).unwrap();
        let layers: Vec<NdArray> = (0..n).map(|l| st.layer_hidden(l)).collect();
        if threshold_margin(&layers, &tr.hidden, &hint) > 1e-4 {
            break tr;
        }
        student = Student::new(cfg.clone(), SoftCopyConfig::default(), rng.gen()).unwrap();
    };
    let f = |s: &Student| {
        let mut g = Graph::new();
        let vars = s.forward_graph(&mut g, &src, tgt.len(), &mut Dropout::off()).unwrap();
        let nll = nll_loss(&mut g, vars.logits, &tgt, hint.label_smoothing).unwrap();
        let hid = hid_loss(&mut g, &vars.hidden, &trace.hidden, &hint).unwrap();
        let align = align_loss(&mut g, &vars.attn, &trace.attn).unwrap();
        let hid = g.scale(hid, hint.lambda).unwrap();
        let align = g.scale(align, hint.mu).unwrap();
        let total = g.add(nll, hid).unwrap();
        let v = g.add(total, align).unwrap();
        (g, v)
    };
    out.push(check_params(&tag("student objective"), &mut student, student_store, &f, 3, &mut rng));
    out
}

/// Seeds used by the gradient suite; they cycle through every
/// `d ∈ {8, 16}`, `H ∈ {1, 2}`, `N ∈ {1, 2}` combination.
pub const GRADIENT_SEEDS: std::ops::Range<u64> = 0..24;

/// Synthetic task, vocabulary and encoded splits shared by the pipeline tests.
pub struct Lab {
    pub spec: SyntheticTaskSpec,
    pub vocab: Vocabulary,
    pub train: EncodedCorpus,
    pub test: EncodedCorpus,
    pub model: ModelConfig,
}

impl Lab {
    pub fn new(spec: SyntheticTaskSpec) -> Self {
        let splits = generate_synthetic(&spec).unwrap();
        let vocab = Vocabulary::build(&splits.train);
        let model = ModelConfig {
            src_vocab: vocab.len(),
            tgt_vocab: vocab.len(),
            ..ModelConfig::default()
        };
        Self {
            train: EncodedCorpus::encode(&splits.train, &vocab),
            test: EncodedCorpus::encode(&splits.test, &vocab),
            spec,
            vocab,
            model,
        }
    }

    pub fn references(&self) -> Vec<Vec<usize>> {
        self.test.pairs.iter().map(|p| p.1.clone()).collect()
    }

    pub fn teacher_config() -> TrainConfig {
        nartlab::config::LabConfig::default().teacher
    }

    pub fn student_config(mode: AblationMode, seed: u64) -> TrainConfig {
        TrainConfig {
            ablation: mode,
            seed,
            ..nartlab::config::LabConfig::default().student
        }
    }

    pub fn train_teacher(&self, cfg: TrainConfig) -> Teacher {
        let mut t = TeacherTrainer::new(self.model.clone(), self.train.clone(), cfg).unwrap();
        t.run(&mut |_| {}).unwrap();
        t.into_model()
    }

    pub fn teacher_bleu(&self, teacher: &Teacher) -> f64 {
        let hyps: Vec<Vec<usize>> = self
            .test
            .pairs
            .iter()
            .map(|(s, _)| teacher.greedy_decode(s, teacher.config().max_len).unwrap().tokens().to_vec())
            .collect();
        bleu(&hyps, &self.references()).unwrap()
    }

    pub fn distill(&self, teacher: &Teacher) -> EncodedCorpus {
        distill_corpus(teacher, &self.train).unwrap().training_pairs()
    }

    pub fn train_student(&self, teacher: &Teacher, distilled: &EncodedCorpus, cfg: TrainConfig) -> Student {
        let t = cfg.ablation.needs_teacher().then(|| teacher.clone());
        let mut s = StudentTrainer::new(self.model.clone(), t, distilled.clone(), cfg).unwrap();
        s.run(&mut |_| {}).unwrap();
        s.into_model()
    }

    /// Student outputs on the test split.
    pub fn student_outputs(&self, student: &Student, teacher: &Teacher, cfg: &InferenceConfig) -> Vec<Vec<usize>> {
        self.test
            .pairs
            .iter()
            .map(|(s, _)| translate(s, student, Some(teacher), cfg).unwrap().output().to_vec())
            .collect()
    }

    pub fn bleu(&self, hyps: &[Vec<usize>]) -> f64 {
        bleu(hyps, &self.references()).unwrap()
    }
}

pub fn length_bias(distilled: &EncodedCorpus) -> i64 {
    default_length_bias_encoded(distilled)
}
