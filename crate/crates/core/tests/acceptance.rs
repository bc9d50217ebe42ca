//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr and
//! the tests run one at a time so wall-clock budgets are measured alone.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use alignnet::aligner::{align_schemas, hungarian_max};
use alignnet::autodiff::{cosine, grad_check, Graph, Tensor, Var};
use alignnet::corpus::{
    build_vocabulary, generate_synthetic, subsample_benchmark, tokenize, write_embeddings, BenchmarkConfig, EmbeddingTable,
    Pair, SynthConfig, SyntheticCorpus, Table, Vocabulary,
};
use alignnet::decoder::{beam_search, greedy_decode, Decoded, StepModel, TableDecoder};
use alignnet::encoder::{embed_table, PairEmbedding};
use alignnet::evaluator::bleu4;
use alignnet::model::{Bound, ModelConfig, ModelParams};
use alignnet::pipeline::{prepare, HungarianAligner, SchemaAligner, SupportPool};
use alignnet::trainer::{instance_loss, total_loss, total_loss_graph, train, train_with_aligner, write_curve_csv, TrainConfig, Trainer};
use alignnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

type Outcome = std::result::Result<String, String>;

fn criterion(id: usize, name: &str, body: impl FnOnce() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // written straight to the handle so the line survives output capture
    let _ = writeln!(std::io::stderr(), "{tag} criterion {id:>2} {name}: {detail} [{secs:.1}s]");
    if let Err(d) = outcome {
        panic!("criterion {id} failed: {d}");
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration, what: &str) -> std::result::Result<(), String> {
    check(elapsed < budget, || format!("{what} took {elapsed:?}, budget {budget:?}"))
}

fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect()
}

/// Every injective row-to-column map when `n <= m` (column-to-row otherwise),
/// scored by summing in ascending row order; the first strict maximum wins.
fn brute_force_max(w: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let (n, m) = (w.len(), w[0].len());
    let k = n.min(m);
    let mut best = (f64::NEG_INFINITY, Vec::new());
    fn go(depth: usize, k: usize, span: usize, used: &mut Vec<bool>, pick: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if depth == k {
            visit(pick);
            return;
        }
        for j in 0..span {
            if !used[j] {
                used[j] = true;
                pick.push(j);
                go(depth + 1, k, span, used, pick, visit);
                pick.pop();
                used[j] = false;
            }
        }
    }
    let mut visit = |pick: &[usize]| {
        let mut pairs: Vec<(usize, usize)> = if n <= m {
            pick.iter().enumerate().map(|(i, &j)| (i, j)).collect()
        } else {
            pick.iter().enumerate().map(|(j, &i)| (i, j)).collect()
        };
        pairs.sort();
        let total: f64 = pairs.iter().map(|&(i, j)| w[i][j]).sum();
        if total > best.0 {
            best = (total, pairs);
        }
    };
    go(0, k, n.max(m), &mut vec![false; n.max(m)], &mut Vec::new(), &mut visit);
    best
}

#[test]
fn c01_hungarian_matches_exhaustive_search() {
    criterion(1, "hungarian vs exhaustive maximum", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let start = Instant::now();
        let mut shapes = BTreeSet::new();
        for trial in 0..1000 {
            let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
            shapes.insert((n, m));
            let w = uniform_matrix(&mut rng, n, m);
            let a = hungarian_max(&w).map_err(|e| e.to_string())?;
            let (best, _) = brute_force_max(&w);
            check(a.total == best, || format!("trial {trial} ({n}x{m}): {} vs exhaustive {best}", a.total))?;
            check(a.pairs.len() == n.min(m), || format!("trial {trial}: {} pairs", a.pairs.len()))?;
        }
        within(start.elapsed(), Duration::from_secs(5), "1000 matrices")?;
        Ok(format!("1000 matrices over {} shapes, totals equal exactly", shapes.len()))
    });
}

#[test]
fn c02_schema_alignment_matches_brute_force() {
    criterion(2, "alignment vs brute force", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut dropped = 0;
        for trial in 0..500 {
            let (n, m, d) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(2..=5));
            let input = uniform_matrix(&mut rng, n, d);
            let support = uniform_matrix(&mut rng, m, d);
            let sims: Vec<Vec<f64>> = input
                .iter()
                .map(|a| support.iter().map(|b| cosine(a, b).unwrap_or(0.0)).collect())
                .collect();
            let (_, pairs) = brute_force_max(&sims);
            let kept: Vec<(usize, usize)> = pairs.into_iter().filter(|&(i, j)| sims[i][j] >= 0.0).collect();
            let r: f64 = kept.iter().map(|&(i, j)| sims[i][j]).sum();
            dropped += n.min(m) - kept.len();

            let got = align_schemas(&input, &support).map_err(|e| e.to_string())?;
            let got_pairs: Vec<(usize, usize)> = got.pairs.iter().map(|p| (p.input, p.support)).collect();
            check(got_pairs == kept, || format!("trial {trial}: pairs {got_pairs:?} vs {kept:?}"))?;
            check((got.score - r).abs() <= 1e-12, || format!("trial {trial}: r {} vs {r}", got.score))?;
            check(got.score >= 0.0 && got.score <= n.min(m) as f64, || format!("trial {trial}: r {} out of range", got.score))?;
        }
        Ok(format!("500 instances agree, {dropped} negative pairs discarded"))
    });
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `sum(y * w)` with a fixed random `w` so every output element matters.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let positive = random_tensor(rng, &[5], 0.2, 2.0);
    let mut t = |s: &[usize]| random_tensor(rng, s, -1.0, 1.0);
    let cases: Vec<OpCase> = vec![
        ("matmul [m,k]x[k,n]", vec![t(&[3, 4]), t(&[4, 2])], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, 1)
        })),
        ("matmul [m,k]x[k]", vec![t(&[3, 4]), t(&[4])], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, 2)
        })),
        ("matmul [k]x[k,n]", vec![t(&[4]), t(&[4, 5])], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, 3)
        })),
        ("add", vec![t(&[2, 3]), t(&[2, 3])], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, 4)
        })),
        ("add broadcast", vec![t(&[3, 4]), t(&[4])], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, 5)
        })),
        ("add scalar", vec![t(&[5]), t(&[1])], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, 6)
        })),
        ("mul", vec![t(&[2, 3]), t(&[2, 3])], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted(g, y, 7)
        })),
        ("mul scalar", vec![t(&[1]), t(&[4])], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted(g, y, 8)
        })),
        ("tanh", vec![t(&[2, 3])], Box::new(|g, v| {
            let y = g.tanh(v[0])?;
            weighted(g, y, 9)
        })),
        ("sigmoid", vec![t(&[6])], Box::new(|g, v| {
            let y = g.sigmoid(v[0])?;
            weighted(g, y, 10)
        })),
        ("concat", vec![t(&[2, 3]), t(&[2, 1]), t(&[2, 2])], Box::new(|g, v| {
            let y = g.concat(v)?;
            weighted(g, y, 11)
        })),
        ("stack", vec![t(&[3]), t(&[3]), t(&[3])], Box::new(|g, v| {
            let y = g.stack(v)?;
            weighted(g, y, 12)
        })),
        ("softmax", vec![t(&[3, 5])], Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            weighted(g, y, 13)
        })),
        ("log", vec![positive], Box::new(|g, v| {
            let y = g.log(v[0])?;
            weighted(g, y, 14)
        })),
        // entries kept clear of the kink at the floor
        ("clamp_min", vec![Tensor::vector(vec![-0.8, -0.3, 0.4, 0.9, -0.05, 0.25])], Box::new(|g, v| {
            let y = g.clamp_min(v[0], 0.1)?;
            weighted(g, y, 15)
        })),
        ("sum", vec![t(&[2, 4])], Box::new(|g, v| {
            let y = g.tanh(v[0])?;
            g.sum(y)
        })),
        ("mean", vec![t(&[7])], Box::new(|g, v| {
            let y = g.tanh(v[0])?;
            g.mean(y)
        })),
        ("scale", vec![t(&[3, 2])], Box::new(|g, v| {
            let y = g.scale(v[0], -2.5)?;
            weighted(g, y, 16)
        })),
        ("slice", vec![t(&[3, 6])], Box::new(|g, v| {
            let y = g.slice(v[0], 2, 3)?;
            weighted(g, y, 17)
        })),
        ("index_select", vec![t(&[4, 3])], Box::new(|g, v| {
            let y = g.index_select(v[0], vec![2, 0, 2, 3])?;
            weighted(g, y, 18)
        })),
        ("reshape", vec![t(&[2, 6])], Box::new(|g, v| {
            let y = g.reshape(v[0], vec![3, 4])?;
            weighted(g, y, 19)
        })),
        ("row", vec![t(&[3, 4])], Box::new(|g, v| {
            let y = g.row(v[0], 1)?;
            weighted(g, y, 20)
        })),
        ("cosine", vec![t(&[5]), t(&[5])], Box::new(|g, v| g.cosine(v[0], v[1]))),
    ];
    cases
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embedding_dim: 3,
        pair_dim: 4,
        encoder_hidden: 3,
        decoder_hidden: 6,
        output_embedding_dim: 2,
        copy_hidden: 3,
        init_scale: 0.5,
        forget_bias: 1.0,
    }
}

fn tiny_corpus() -> (Vec<Table>, EmbeddingTable) {
    let mut emb = EmbeddingTable::new(3);
    for (i, w) in ["year", "season", "team", "club"].iter().enumerate() {
        let x = i as f64 + 1.0;
        emb.insert(w, vec![(x * 0.7).sin(), (x * 1.3).cos(), 0.2 * x - 0.3]).unwrap();
    }
    let tables = (0..4)
        .map(|i| {
            let team = ["ducati", "honda"][i % 2];
            let (a, b) = if i % 2 == 0 { ("year", "team") } else { ("season", "club") };
            Table {
                id: format!("t{i}"),
                pairs: vec![
                    Pair {
                        attribute: tokenize(a),
                        value: vec![format!("{}", 2000 + i)],
                    },
                    Pair {
                        attribute: tokenize(b),
                        value: vec![team.to_string()],
                    },
                ],
                reference: tokenize(&format!("{team} won .")),
            }
        })
        .collect();
    (tables, emb)
}

#[test]
fn c03_gradients_match_finite_differences() {
    criterion(3, "finite-difference gradients", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst_op = (0.0f64, "");
        let cases = op_cases(&mut rng);
        let count = cases.len();
        for (name, inputs, f) in cases {
            let err = grad_check(|g, v| f(g, v), &inputs).map_err(|e| format!("{name}: {e}"))?;
            check(err < 1e-4, || format!("op {name}: relative error {err:e}"))?;
            if err > worst_op.0 {
                worst_op = (err, name);
            }
        }

        let (tables, emb) = tiny_corpus();
        let config = TrainConfig {
            lambda: 0.01,
            aligner: true,
            min_count: 0,
            support_size: Some(3),
            model: tiny_model(),
            ..Default::default()
        };
        let mut trainer = Trainer::new(config.clone(), &tables, &[], &emb).map_err(|e| e.to_string())?;
        let prepared = trainer.prepare_instance(0).map_err(|e| e.to_string())?;
        check(prepared.alignment.as_ref().is_some_and(|(_, a)| a.score > 0.0), || "instance was not aligned".into())?;
        check(tables[0].pairs.len() == 2 && tables[0].reference.len() == 3, || "instance shape".into())?;
        let params = trainer.params().clone();
        let vocab = trainer.vocab().clone();
        let pool = trainer.pool().clone();
        let ids: Vec<_> = params.ids().collect();
        let inputs: Vec<Tensor> = ids.iter().map(|&id| params.get(id).clone()).collect();
        let full = grad_check(
            |g, vars| {
                let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
                let bound = Bound::new(g, &params, false).with_overrides(&overrides);
                Ok(instance_loss(g, &bound, &params, &vocab, &tables[0], &prepared, &pool, &config)?.total)
            },
            &inputs,
        )
        .map_err(|e| e.to_string())?;
        check(full < 1e-3, || format!("full instance loss: relative error {full:e}"))?;
        within(start.elapsed(), Duration::from_secs(30), "gradient checks")?;
        Ok(format!(
            "{count} op cases (worst {} at {:.1e}), full loss over {} tensors at {full:.1e}",
            worst_op.1,
            worst_op.0,
            ids.len()
        ))
    });
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    const W: [&str; 12] = ["in", "won", "team", "the", "at", "ducati", "2008", "rossi", "for", "club", "points", "."];
    if rng.random_bool(0.2) {
        format!("oov{}", rng.random_range(0..50))
    } else {
        W[rng.random_range(0..W.len())].to_string()
    }
}

fn random_table(rng: &mut ChaCha8Rng, id: usize) -> Table {
    let n = rng.random_range(1..=4);
    let mut words = |k: std::ops::RangeInclusive<usize>| (0..rng.random_range(k)).map(|_| random_word(rng)).collect::<Vec<_>>();
    let pairs = (0..n)
        .map(|_| Pair {
            attribute: words(1..=2),
            value: words(1..=3),
        })
        .collect();
    Table {
        id: format!("r{id}"),
        pairs,
        reference: words(1..=6),
    }
}

fn random_setup(rng: &mut ChaCha8Rng, trial: usize) -> (ModelParams, Vocabulary, Table, Vec<PairEmbedding>) {
    let mut config = tiny_model();
    config.init_scale = rng.random_range(0.05..2.0);
    let corpus: Vec<Table> = (0..3).map(|i| random_table(rng, i)).collect();
    let vocab = build_vocabulary(&corpus, 0);
    let table = random_table(rng, 99);
    let mut emb = EmbeddingTable::new(config.embedding_dim);
    for t in table.pairs.iter().flat_map(|p| p.attribute.iter().chain(&p.value)) {
        if !emb.contains(t) && rng.random_bool(0.8) {
            emb.insert(t, (0..config.embedding_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        }
    }
    let params = ModelParams::init(&config, vocab.len(), trial as u64).unwrap();
    let pairs = embed_table(&table, &emb).unwrap();
    (params, vocab, table, pairs)
}

#[test]
fn c04_extended_distribution_normalizes() {
    criterion(4, "extended distribution sums to one", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst = 0.0f64;
        for trial in 0..1000 {
            let (params, vocab, table, pairs) = random_setup(&mut rng, trial);
            let dec = TableDecoder::new(&params, &vocab, &table, &pairs).map_err(|e| e.to_string())?;
            let mut state = dec.start().map_err(|e| e.to_string())?;
            let mut prev = dec.start_token();
            for _ in 0..3 {
                let (next, dist) = dec.distribution(&state, prev).map_err(|e| e.to_string())?;
                let slot_total: f64 = dist.slots.iter().sum();
                for total in [dist.total(), slot_total] {
                    worst = worst.max((total - 1.0).abs());
                    check((total - 1.0).abs() <= 1e-9, || format!("trial {trial}: total {total}"))?;
                }
                check(dist.merged.iter().all(|&p| p >= 0.0), || format!("trial {trial}: negative mass"))?;
                state = next;
                prev = rng.random_range(0..dist.merged.len());
            }
        }
        Ok(format!("1000 models x 3 steps, max deviation {worst:.1e}"))
    });
}

/// Three decoding steps over tokens {end, a, b}; the greedy first choice leads nowhere good.
struct Toy;

impl StepModel for Toy {
    type State = Vec<usize>;

    fn start(&self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&self, prefix: &Vec<usize>, prev: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut next = prefix.clone();
        if prev != self.start_token() {
            next.push(prev);
        }
        let probs = match next.as_slice() {
            [] => vec![0.0, 0.6, 0.4],
            [1] => vec![0.35, 0.3, 0.35],
            [2] => vec![0.9, 0.05, 0.05],
            _ => vec![0.5, 0.25, 0.25],
        };
        Ok((next, probs))
    }

    fn start_token(&self) -> usize {
        usize::MAX
    }

    fn end_token(&self) -> usize {
        0
    }
}

/// Prefix-hashed random distributions over `k` tokens (token 0 ends).
struct RandomTree {
    k: usize,
    seed: u64,
}

impl StepModel for RandomTree {
    type State = u64;

    fn start(&self) -> Result<u64> {
        Ok(self.seed)
    }

    fn step(&self, h: &u64, prev: usize) -> Result<(u64, Vec<f64>)> {
        let next = h.wrapping_mul(1_000_003).wrapping_add(prev as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(next);
        let raw: Vec<f64> = (0..self.k).map(|_| rng.random_range(0.0f64..1.0).powi(3) + 1e-3).collect();
        let z: f64 = raw.iter().sum();
        Ok((next, raw.into_iter().map(|x| x / z).collect()))
    }

    fn start_token(&self) -> usize {
        self.k
    }

    fn end_token(&self) -> usize {
        0
    }
}

fn exhaustive<M: StepModel>(model: &M, max_len: usize) -> Decoded {
    fn go<M: StepModel>(model: &M, state: &M::State, prev: usize, prefix: &mut Vec<usize>, score: f64, left: usize, best: &mut Decoded) {
        let (next, probs) = model.step(state, prev).unwrap();
        for (tok, p) in probs.iter().enumerate() {
            let s = score + p.ln();
            if tok == model.end_token() || left == 1 {
                if tok != model.end_token() {
                    prefix.push(tok);
                }
                if s > best.log_prob {
                    *best = Decoded { tokens: prefix.clone(), log_prob: s };
                }
                if tok != model.end_token() {
                    prefix.pop();
                }
                continue;
            }
            prefix.push(tok);
            go(model, &next, tok, prefix, s, left - 1, best);
            prefix.pop();
        }
    }
    let mut best = Decoded {
        tokens: Vec::new(),
        log_prob: f64::NEG_INFINITY,
    };
    go(model, &model.start().unwrap(), model.start_token(), &mut Vec::new(), 0.0, max_len, &mut best);
    best
}

#[test]
fn c05_beam_search_properties() {
    criterion(5, "beam search properties", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut improved = 0;
        for trial in 0..100 {
            let (params, vocab, table, pairs) = random_setup(&mut rng, 1000 + trial);
            let dec = TableDecoder::new(&params, &vocab, &table, &pairs).map_err(|e| e.to_string())?;
            let greedy = greedy_decode(&dec, 20).map_err(|e| e.to_string())?;
            let one = beam_search(&dec, 1, 20).map_err(|e| e.to_string())?;
            check(one == greedy, || format!("model {trial}: beam 1 {one:?} vs greedy {greedy:?}"))?;
            let five = beam_search(&dec, 5, 20).map_err(|e| e.to_string())?;
            check(five.log_prob >= greedy.log_prob, || {
                format!("model {trial}: beam 5 {} < greedy {}", five.log_prob, greedy.log_prob)
            })?;
            improved += usize::from(five.log_prob > greedy.log_prob);
        }

        let greedy = greedy_decode(&Toy, 3).map_err(|e| e.to_string())?;
        let beam = beam_search(&Toy, 5, 3).map_err(|e| e.to_string())?;
        let best = exhaustive(&Toy, 3);
        check(beam.tokens == best.tokens && (beam.log_prob - best.log_prob).abs() < 1e-12, || {
            format!("toy: beam {beam:?} vs exhaustive {best:?}")
        })?;
        check(greedy.log_prob < best.log_prob, || "toy model should defeat greedy".into())?;

        // with room for every live hypothesis the beam is exhaustive
        for seed in 0..50 {
            let tree = RandomTree { k: 3, seed };
            let beam = beam_search(&tree, 9, 3).map_err(|e| e.to_string())?;
            let best = exhaustive(&tree, 3);
            check(beam.tokens == best.tokens, || format!("tree {seed}: {beam:?} vs {best:?}"))?;
        }
        Ok(format!(
            "beam 1 == greedy on 100 models, beam 5 strictly better on {improved}; toy optimum {:?} ({:.4} vs greedy {:.4})",
            best.tokens, best.log_prob, greedy.log_prob
        ))
    });
}

fn embedding_bytes(emb: &EmbeddingTable) -> Vec<u8> {
    let mut buf = Vec::new();
    write_embeddings(&mut buf, emb).unwrap();
    buf
}

struct Stub;

impl SchemaAligner for Stub {
    fn align(
        &self,
        _: &ModelParams,
        _: &[PairEmbedding],
        _: &[&[PairEmbedding]],
    ) -> Result<Option<(usize, alignnet::aligner::Alignment)>> {
        Ok(None)
    }
}

fn size50(corpus: &SyntheticCorpus, replicates: usize) -> Vec<Vec<Table>> {
    let cfg = BenchmarkConfig {
        sizes: vec![50],
        replicates,
        min_unseen: 0.8,
        ..Default::default()
    };
    let b = subsample_benchmark(&corpus.train, &corpus.dev, &corpus.test, &cfg).unwrap();
    b.subsets.iter().map(|s| s.cloned_tables(&corpus.train)).collect()
}

fn curve_bytes(curve: &[alignnet::trainer::CurvePoint]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, curve).unwrap();
    buf
}

#[test]
fn c06_frozen_embeddings_and_base_equivalence() {
    criterion(6, "frozen embeddings and base equivalence", || {
        let corpus = generate_synthetic(&SynthConfig::default(), 13).map_err(|e| e.to_string())?;
        let train_set = size50(&corpus, 1).remove(0);
        let dev = &corpus.dev[..20];
        let before = embedding_bytes(&corpus.embeddings);
        let fingerprint = corpus.embeddings.fingerprint();

        let align = TrainConfig::default();
        let out = train(&train_set, dev, &corpus.embeddings, &align).map_err(|e| e.to_string())?;
        check(out.epochs.len() == 50, || format!("{} epochs", out.epochs.len()))?;
        check(out.epochs.iter().any(|e| e.mean_score > 0.0), || "aligner never fired".into())?;
        check(embedding_bytes(&corpus.embeddings) == before && corpus.embeddings.fingerprint() == fingerprint, || {
            "embeddings changed during training".into()
        })?;
        let pool = SupportPool::new(&train_set, &corpus.embeddings).map_err(|e| e.to_string())?;
        for (t, pairs) in train_set.iter().zip(&pool.pairs) {
            let fresh = embed_table(t, &corpus.embeddings).map_err(|e| e.to_string())?;
            check(&fresh == pairs, || format!("{}: pair embeddings differ", t.id))?;
        }

        let base = TrainConfig { aligner: false, ..TrainConfig::default() };
        let a = train(&train_set, dev, &corpus.embeddings, &base).map_err(|e| e.to_string())?;
        let b = train_with_aligner(&train_set, dev, &corpus.embeddings, &base, Some(&Stub)).map_err(|e| e.to_string())?;
        let ja = a.best.to_json().map_err(|e| e.to_string())?;
        let jb = b.best.to_json().map_err(|e| e.to_string())?;
        check(ja == jb, || "base checkpoint differs from the stubbed-aligner checkpoint".into())?;
        check(curve_bytes(&a.curve) == curve_bytes(&b.curve), || "learning curves differ".into())?;

        // aligner switched on but stubbed out: same weights as base
        let c = train_with_aligner(&train_set, dev, &corpus.embeddings, &align, Some(&Stub)).map_err(|e| e.to_string())?;
        let pa = serde_json::to_string(&a.best.params).unwrap();
        let pc = serde_json::to_string(&c.best.params).unwrap();
        check(pa == pc && curve_bytes(&a.curve) == curve_bytes(&c.curve), || "stubbed aligner changed training".into())?;
        check(embedding_bytes(&corpus.embeddings) == before, || "embeddings changed".into())?;
        Ok(format!(
            "embeddings bitwise equal after 50 epochs; base and stubbed runs byte-identical ({} checkpoint bytes)",
            ja.len()
        ))
    });
}

#[test]
fn c07_overfits_small_corpus() {
    criterion(7, "overfit 20 instances", || {
        let start = Instant::now();
        let corpus = generate_synthetic(&SynthConfig::default(), 7).map_err(|e| e.to_string())?;
        let tables = &corpus.train[..20];
        let config = TrainConfig { aligner: false, ..TrainConfig::default() };
        let mut trainer = Trainer::new(config, tables, &[], &corpus.embeddings).map_err(|e| e.to_string())?;
        let mut losses = Vec::new();
        let mut reached = None;
        let mut acc = 0.0;
        for epoch in 1..=200 {
            losses.push(trainer.run_epoch().map_err(|e| e.to_string())?.train_loss);
            acc = trainer.token_accuracy(tables).map_err(|e| e.to_string())?;
            if acc >= 0.95 && epoch >= 5 {
                reached = Some(epoch);
                break;
            }
        }
        check(losses[..5].windows(2).all(|w| w[1] < w[0]), || format!("first losses not decreasing: {:?}", &losses[..5]))?;
        let epoch = reached.ok_or_else(|| format!("accuracy {acc:.3} after 200 epochs"))?;
        within(start.elapsed(), Duration::from_secs(120), "overfitting")?;
        Ok(format!("token accuracy {acc:.3} at epoch {epoch}, loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]))
    });
}

#[test]
fn c08_aligner_beats_base_on_unseen_schemas() {
    criterion(8, "AlignNet vs Base on the synthetic benchmark", || {
        let start = Instant::now();
        let corpus = generate_synthetic(&SynthConfig::default(), 13).map_err(|e| e.to_string())?;
        let subsets = size50(&corpus, 5);
        let refs: Vec<Vec<String>> = corpus.test.iter().map(|t| t.reference.clone()).collect();
        let mut scores = [Vec::new(), Vec::new()];
        for (r, train_set) in subsets.iter().enumerate() {
            let seed = 13 + r as u64;
            for (slot, aligner) in [false, true].into_iter().enumerate() {
                let config = TrainConfig {
                    aligner,
                    init_seed: seed,
                    data_seed: seed,
                    support_seed: seed,
                    ..Default::default()
                };
                let out = train(train_set, &corpus.dev, &corpus.embeddings, &config).map_err(|e| e.to_string())?;
                let params = out.best.model().map_err(|e| e.to_string())?;
                let pool = SupportPool::new(train_set, &corpus.embeddings).map_err(|e| e.to_string())?;
                let outputs = out
                    .best
                    .inference(&params, &corpus.embeddings, &pool, 5)
                    .generate_all(&corpus.test)
                    .map_err(|e| e.to_string())?;
                scores[slot].push(100.0 * bleu4(&outputs, &refs).map_err(|e| e.to_string())?);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (base, align) = (mean(&scores[0]), mean(&scores[1]));
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ");
        let detail = format!(
            "Base {base:.2} [{}] vs AlignNet {align:.2} [{}], gap {:.2}",
            fmt(&scores[0]),
            fmt(&scores[1]),
            align - base
        );
        check(align >= base + 5.0, || detail.clone())?;
        within(start.elapsed(), Duration::from_secs(3600), "benchmark")?;
        Ok(detail)
    });
}

#[test]
fn c09_benchmark_construction() {
    criterion(9, "benchmark subsampling", || {
        let corpus = generate_synthetic(&SynthConfig::default(), 13).map_err(|e| e.to_string())?;
        let cfg = BenchmarkConfig::default();
        let a = subsample_benchmark(&corpus.train, &corpus.dev, &corpus.test, &cfg).map_err(|e| e.to_string())?;
        let b = subsample_benchmark(&corpus.train, &corpus.dev, &corpus.test, &cfg).map_err(|e| e.to_string())?;
        check(a == b, || "same seed gave different benchmarks".into())?;
        let mut lowest = f64::INFINITY;
        for &size in &cfg.sizes {
            let subsets: Vec<_> = a.subsets.iter().filter(|s| s.size == size).collect();
            check(subsets.len() == 10, || format!("size {size}: {} subsets", subsets.len()))?;
            for s in subsets {
                check(s.indices.len() == size, || format!("size {size}: subset of {}", s.indices.len()))?;
                check(s.unseen > 0.8, || format!("size {size}: unseen {}", s.unseen))?;
                lowest = lowest.min(s.unseen);
            }
        }
        let other = BenchmarkConfig { seed: cfg.seed + 1, ..cfg.clone() };
        let c = subsample_benchmark(&corpus.train, &corpus.dev, &corpus.test, &other).map_err(|e| e.to_string())?;
        check(c.subsets != a.subsets, || "a different seed gave the same subsets".into())?;
        Ok(format!("sizes {:?} x 10 subsets, lowest unseen proportion {lowest:.3}", cfg.sizes))
    });
}

/// Training tables whose attribute clusters are exactly `clusters`.
fn tables_with_clusters<'a>(corpus: &SyntheticCorpus, pool: &'a [Table], clusters: &BTreeSet<usize>) -> Vec<&'a Table> {
    pool.iter()
        .filter(|t| t.attributes().iter().map(|a| corpus.cluster_of(a).unwrap()).collect::<BTreeSet<_>>() == *clusters)
        .collect()
}

/// Aligns `input` against `support` and checks that every matched attribute
/// lands in its own cluster and that the pair at `orphan` stays unmatched.
fn aligned_to_cluster_mates(
    corpus: &SyntheticCorpus,
    params: &ModelParams,
    input: &Table,
    orphan: usize,
    support: &[&Table],
) -> std::result::Result<Vec<String>, String> {
    let tables: Vec<Table> = support.iter().map(|t| (*t).clone()).collect();
    let pool = SupportPool::new(&tables, &corpus.embeddings).map_err(|e| e.to_string())?;
    let pairs = embed_table(input, &corpus.embeddings).map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..tables.len()).collect();
    let p = prepare(params, Some(&HungarianAligner), &pool, pairs, &all).map_err(|e| e.to_string())?;
    let (k, alignment) = p.alignment.ok_or("no alignment")?;
    let (attrs, sup) = (input.attributes(), tables[k].attributes());
    let mut shown = Vec::new();
    for a in &alignment.pairs {
        check(a.input != orphan, || format!("{} was matched to {}", attrs[a.input], sup[a.support]))?;
        check(corpus.cluster_of(&attrs[a.input]) == corpus.cluster_of(&sup[a.support]), || {
            format!("{} aligned to {}", attrs[a.input], sup[a.support])
        })?;
        shown.push(format!("{}->{}", attrs[a.input], sup[a.support]));
    }
    check(alignment.pairs.len() + 1 == attrs.len(), || format!("{} of {} attributes matched", alignment.pairs.len(), attrs.len()))?;
    Ok(shown)
}

#[test]
fn c10_qualitative_alignment() {
    criterion(10, "qualitative alignment", || {
        let cfg = SynthConfig {
            held_out_clusters: 1,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic(&cfg, 13).map_err(|e| e.to_string())?;
        let orphan_cluster = cfg.clusters - 1;
        let orphan = &corpus.clusters[orphan_cluster];
        let with_orphan = |base: &Table, synonym: usize| {
            let mut t = base.clone();
            t.pairs.insert(
                1,
                Pair {
                    attribute: vec![orphan.synonyms[synonym].clone()],
                    value: vec![orphan.values[0].clone()],
                },
            );
            t
        };

        // sweep over every combination and test-only synonym under untrained weights; reported, not asserted
        let init = ModelParams::init(&ModelConfig::default(), 20, 13).map_err(|e| e.to_string())?;
        let (mut probes, mut missed) = (0, 0);
        for combo in &corpus.combinations {
            let clusters: BTreeSet<usize> = combo.clusters.iter().copied().collect();
            let support = tables_with_clusters(&corpus, &corpus.train, &clusters);
            if support.is_empty() {
                continue;
            }
            for synonym in 1..cfg.synonyms_per_cluster {
                let base = Table {
                    id: "probe".into(),
                    pairs: combo
                        .clusters
                        .iter()
                        .map(|&c| Pair {
                            attribute: vec![corpus.clusters[c].synonyms[synonym].clone()],
                            value: vec![corpus.clusters[c].values[0].clone()],
                        })
                        .collect(),
                    reference: Vec::new(),
                };
                if aligned_to_cluster_mates(&corpus, &init, &with_orphan(&base, synonym), 1, &support).is_err() {
                    missed += 1;
                }
                probes += 1;
            }
        }
        check(probes > 0, || "no probes".into())?;

        // the first usable test table under a trained AlignNet model
        let train_set = size50(&corpus, 1).remove(0);
        let config = TrainConfig { epochs: 10, ..Default::default() };
        let out = train(&train_set, &corpus.dev[..20], &corpus.embeddings, &config).map_err(|e| e.to_string())?;
        let params = out.best.model().map_err(|e| e.to_string())?;
        let (table, support) = corpus
            .test
            .iter()
            .find_map(|t| {
                let clusters = t.attributes().iter().map(|a| corpus.cluster_of(a).unwrap()).collect();
                let s = tables_with_clusters(&corpus, &train_set, &clusters);
                (!s.is_empty()).then_some((t, s))
            })
            .ok_or("no test table has a matching training schema")?;
        let input = with_orphan(table, 1);
        let shown = aligned_to_cluster_mates(&corpus, &params, &input, 1, &support).map_err(|e| format!("trained, {}: {e}", table.id))?;
        Ok(format!(
            "{missed}/{probes} untrained probes missed; trained {}: {} with {} unmatched",
            table.id,
            shown.join(", "),
            orphan.synonyms[1]
        ))
    });
}

#[test]
fn c11_loss_arithmetic() {
    criterion(11, "loss arithmetic", || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for i in 0..10_000 {
            let nll = rng.random_range(0.0..100.0);
            let r = rng.random_range(0.0..6.0);
            let lambda = if i % 2 == 0 { 0.01 } else { rng.random_range(0.0..1.0) };
            let expected = nll * (1.0 + lambda * r);
            let got = total_loss(nll, r, lambda).map_err(|e| e.to_string())?;
            let mut g = Graph::new();
            let (n, s) = (g.constant(Tensor::scalar(nll)), g.constant(Tensor::scalar(r)));
            let t = total_loss_graph(&mut g, n, s, lambda).map_err(|e| e.to_string())?;
            for v in [got, g.scalar(t)] {
                worst = worst.max((v - expected).abs());
                check((v - expected).abs() <= 1e-12, || format!("({nll}, {r}, {lambda}): {v} vs {expected}"))?;
            }
        }
        check(total_loss(1.0, -0.5, 0.01).is_err(), || "negative r accepted".into())?;
        Ok(format!("10000 triples, max abs error {worst:.1e}"))
    });
}
