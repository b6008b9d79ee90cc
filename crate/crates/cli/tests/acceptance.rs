//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ecsp_core::ensemble::{fuse, EnsembleConfig, Prediction};
use ecsp_core::ingest::{
    decode_binary, encode_binary, load_annotations, load_embeddings, write_embeddings_binary,
    write_embeddings_jsonl, AnnotationFormat,
};
use ecsp_core::metrics::{self, ScoreRecord};
use ecsp_core::model::{
    AnnotationRecord, EmotionClass, JointEmbedding, LanguageTag, ProbabilityVector, Split,
    NUM_CLASSES,
};
use ecsp_core::pipeline::{read_jsonl, write_jsonl};
use ecsp_core::promptgen::{render, PromptArtifact, PromptOptions, PromptVariant};
use ecsp_core::retrieval::{NormalizeMode, RetrievalIndex, RetrievalOutcome, RetrievalParams};
use ecsp_core::tta::{aggregate_tta, make_plan, ImageBuffer, TtaPlan, VariantKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const LANGS: [&str; 3] = ["english", "arabic", "chinese"];

fn record(id: &str, lang: &str, label: Option<EmotionClass>, split: Split) -> AnnotationRecord {
    AnnotationRecord {
        id: id.to_string(),
        art_style: "Realism".to_string(),
        language: LanguageTag::new(lang).unwrap(),
        utterance: format!("comment {id}"),
        gold_emotion: label,
        image_ref: format!("img/{id}.jpg"),
        split,
    }
}

fn random_class(rng: &mut ChaCha8Rng) -> EmotionClass {
    EmotionClass::from_index(rng.random_range(0..NUM_CLASSES)).unwrap()
}

fn random_embedding(rng: &mut ChaCha8Rng, id: &str, d_v: usize, d_t: usize) -> JointEmbedding {
    let mut part = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
    let (img, txt) = (part(d_v), part(d_t));
    JointEmbedding::new(id, img, txt).unwrap()
}

/// Cosine computed directly from the stored f32 values.
fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Exhaustive same-language scan, best first, ties by ascending id.
fn brute_force(
    pool: &[(AnnotationRecord, JointEmbedding)],
    query: &JointEmbedding,
    lang: &LanguageTag,
    exclude: Option<&str>,
    k: usize,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = pool
        .iter()
        .filter(|(r, _)| &r.language == lang && Some(r.id.as_str()) != exclude)
        .map(|(r, e)| (r.id.clone(), cosine(query.joint(), e.joint())))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

struct Pool {
    pool: Vec<(AnnotationRecord, JointEmbedding)>,
    queries: Vec<(AnnotationRecord, JointEmbedding)>,
}

fn make_pool(rng: &mut ChaCha8Rng, p: usize) -> Pool {
    // the first pool pins the largest size and dimension
    let (n, dim) = if p == 0 {
        (2000, 1536)
    } else {
        (rng.random_range(30..=2000), rng.random_range(64..=1536))
    };
    let d_v = rng.random_range(1..dim);
    let d_t = dim - d_v;
    let pool = (0..n)
        .map(|i| {
            let id = format!("p{p}-{i:04}");
            let lang = LANGS[i % 3];
            let label = random_class(rng);
            (record(&id, lang, Some(label), Split::Train), random_embedding(rng, &id, d_v, d_t))
        })
        .collect();
    let queries = (0..200)
        .map(|q| {
            let id = format!("q{p}-{q:03}");
            let lang = LANGS[rng.random_range(0..3)];
            (record(&id, lang, None, Split::Test), random_embedding(rng, &id, d_v, d_t))
        })
        .collect();
    Pool { pool, queries }
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let pools: Vec<Pool> = (0..50).map(|p| make_pool(&mut rng, p)).collect();

    // timed: index build plus every k=1 and k=3 retrieval
    let started = Instant::now();
    let mut results = Vec::with_capacity(pools.len());
    for p in &pools {
        let index = RetrievalIndex::build(&p.pool, NormalizeMode::Joint).map_err(|e| e.to_string())?;
        let queries: Vec<_> = p.queries.iter().map(|(r, e)| (r, e)).collect();
        let mut per_k = Vec::new();
        for k in [1, 3] {
            let params = RetrievalParams { k, eta: 0.75 };
            per_k.push(index.retrieve_batch(&queries, params, true).map_err(|e| e.to_string())?);
        }
        results.push(per_k);
    }
    let elapsed = started.elapsed();

    let checks: Vec<Result<f64, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = pools
            .iter()
            .zip(&results)
            .map(|(p, per_k)| {
                scope.spawn(move || {
                    let mut worst = 0.0f64;
                    for (qi, (r, e)) in p.queries.iter().enumerate() {
                        let want = brute_force(&p.pool, e, &r.language, None, 3);
                        for (ki, k) in [1usize, 3].into_iter().enumerate() {
                            let got = &per_k[ki][qi];
                            let want = &want[..k.min(want.len())];
                            if got.neighbors.len() != want.len() {
                                return Err(format!("{}: {} neighbors, want {}", r.id, got.neighbors.len(), want.len()));
                            }
                            for (g, (wid, wsim)) in got.neighbors.iter().zip(want) {
                                if &g.id != wid {
                                    return Err(format!("{} k={k}: got {} want {wid}", r.id, g.id));
                                }
                                worst = worst.max((g.sim - wsim).abs());
                            }
                        }
                    }
                    Ok(worst)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut worst = 0.0f64;
    for c in checks {
        worst = worst.max(c?);
    }
    ensure(worst <= 1e-12, || format!("max |Δsim| {worst:e} > 1e-12"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {:.2?}", elapsed))?;
    Ok(format!(
        "50 pools, 10000 queries x k in {{1,3}}, max |Δsim| {worst:.1e}, {:.2} s",
        elapsed.as_secs_f64()
    ))
}

/// Splits `target` into f32 components whose squares sum to it as closely
/// as f64 allows.
fn f32_components_for_square_sum(target: f64, parts: usize) -> Vec<f32> {
    let mut rest = target;
    let mut out = Vec::with_capacity(parts);
    for _ in 0..parts {
        let mut b = rest.max(0.0).sqrt() as f32;
        while f64::from(b) * f64::from(b) > rest && b > 0.0 {
            b = f32::from_bits(b.to_bits() - 1);
        }
        rest -= f64::from(b) * f64::from(b);
        out.push(b);
    }
    out
}

fn threshold_semantics() -> Outcome {
    let eta = 0.75;
    let eps = 1e-9;
    let q = JointEmbedding::new("q", vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4]).unwrap();
    let lang = LanguageTag::new("english").unwrap();
    let mut lines = Vec::new();
    for (name, target, expect) in [("η-ε", eta - eps, false), ("η", eta, false), ("η+ε", eta + eps, true)] {
        // cos(q, x) = a / |x| with a = 3, so the rest must square-sum to a²(1/c² - 1)
        let a = 3.0f64;
        let rest = if target == eta {
            vec![2.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        } else {
            f32_components_for_square_sum(a * a * (1.0 / (target * target) - 1.0), 7)
        };
        let x = JointEmbedding::new("x", vec![a as f32, rest[0], rest[1], rest[2]], rest[3..].to_vec()).unwrap();
        let exact = cosine(q.joint(), x.joint());
        ensure((exact - target).abs() < 1e-14, || format!("{name}: constructed cosine {exact}"))?;
        let pool = vec![(record("x", "english", Some(EmotionClass::Awe), Split::Train), x)];
        let index = RetrievalIndex::build(&pool, NormalizeMode::Joint).map_err(|e| e.to_string())?;
        let out = index
            .retrieve(&q, &lang, RetrievalParams { k: 1, eta }, None)
            .map_err(|e| e.to_string())?;
        let present = out.pseudo_label.is_some();
        ensure(present == expect, || {
            format!("{name}: sim {} gave pseudo-label present={present}", out.neighbors[0].sim)
        })?;
        if present {
            ensure(out.pseudo_label == Some(EmotionClass::Awe), || "wrong label".into())?;
        }
        lines.push(format!("{name}:{}", if present { "present" } else { "absent" }));
    }
    Ok(lines.join(", "))
}

fn leave_one_out() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let pool: Vec<_> = (0..1500)
        .map(|i| {
            let id = format!("t{i:04}");
            let label = random_class(&mut rng);
            (record(&id, LANGS[i % 3], Some(label), Split::Train), random_embedding(&mut rng, &id, 256, 256))
        })
        .collect();
    let index = RetrievalIndex::build(&pool, NormalizeMode::Joint).map_err(|e| e.to_string())?;
    let mut picks: Vec<usize> = (0..pool.len()).collect();
    picks.shuffle(&mut rng);
    picks.truncate(1000);
    let queries: Vec<_> = picks.iter().map(|&i| (&pool[i].0, &pool[i].1)).collect();
    let params = RetrievalParams { k: 3, eta: 0.75 };
    let excluded = index.retrieve_batch(&queries, params, true).map_err(|e| e.to_string())?;
    for ((r, _), out) in queries.iter().zip(&excluded) {
        ensure(out.neighbors.iter().all(|n| n.id != r.id), || format!("{} retrieved itself", r.id))?;
    }
    let included = index.retrieve_batch(&queries, params, false).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for ((r, _), out) in queries.iter().zip(&included) {
        let top = &out.neighbors[0];
        ensure(top.id == r.id, || format!("{} top neighbor is {}", r.id, top.id))?;
        worst = worst.max((top.sim - 1.0).abs());
    }
    ensure(worst <= 1e-12, || format!("self similarity off by {worst:e}"))?;
    Ok(format!("1000 train queries, self-sim max |1-s| {worst:.1e}"))
}

#[derive(serde::Deserialize)]
struct Golden {
    id: String,
    pseudo_label: Option<String>,
    sp: String,
    pl: String,
    ecsp: String,
}

fn prompt_goldens() -> Outcome {
    let dir = fixtures();
    let records = load_annotations(&dir.join("annotations.jsonl"), AnnotationFormat::Jsonl)
        .map_err(|e| e.to_string())?;
    let goldens: Vec<Golden> = read_jsonl(&dir.join("prompt_goldens.jsonl")).map_err(|e| e.to_string())?;
    ensure(goldens.len() == 20, || format!("{} goldens", goldens.len()))?;
    let mut degraded = 0;
    for g in &goldens {
        let r = records.iter().find(|r| r.id == g.id).ok_or_else(|| format!("no record {}", g.id))?;
        let label = g
            .pseudo_label
            .as_deref()
            .map(EmotionClass::from_name)
            .transpose()
            .map_err(|e| e.to_string())?;
        let outcome = RetrievalOutcome {
            query_id: r.id.clone(),
            neighbors: Vec::new(),
            pseudo_label: label,
            pseudo_labels: label.into_iter().collect(),
            threshold_used: 0.75,
            k: 1,
        };
        let opts = PromptOptions::default();
        for (variant, want) in [(PromptVariant::Sp, &g.sp), (PromptVariant::Pl, &g.pl), (PromptVariant::Ecsp, &g.ecsp)] {
            let got = render(variant, r, Some(&outcome), opts).map_err(|e| e.to_string())?;
            ensure(&got.text == want, || format!("{} {variant}: {:?} != {:?}", g.id, got.text, want))?;
        }
        ensure(g.sp.contains(&format!("or something else,{}.", r.utterance)), || {
            format!("{}: comma-before-utterance missing", g.id)
        })?;
        if label.is_none() {
            degraded += 1;
            ensure(g.ecsp == g.sp && g.pl == r.utterance, || format!("{}: degradation", g.id))?;
        }
    }
    ensure(degraded > 0, || "no record without a pseudo-label".into())?;
    Ok(format!("20 records x sp/pl/ecsp, {degraded} without pseudo-label"))
}

fn random_simplex(rng: &mut ChaCha8Rng) -> [f64; NUM_CLASSES] {
    let raw: [f64; NUM_CLASSES] = std::array::from_fn(|_| rng.random_range(0.0..1.0f64) + 1e-6);
    let total: f64 = raw.iter().sum();
    raw.map(|x| x / total)
}

fn run_ecsp(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ecsp"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(out.stdout)
}

fn tta_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    for _ in 0..200 {
        let (w, h, c) = (rng.random_range(1..40u32), rng.random_range(1..40u32), rng.random_range(1..5u32));
        let data = (0..w * h * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let img = ImageBuffer::new(w, h, c, data).map_err(|e| e.to_string())?;
        ensure(img.flip_horizontal().flip_horizontal() == img, || format!("hflip {w}x{h}"))?;
        ensure(img.flip_vertical().flip_vertical() == img, || format!("vflip {w}x{h}"))?;
    }
    for i in 0..1000 {
        let size = (rng.random_range(1..5000u32), rng.random_range(1..5000u32));
        let plan = make_plan(&format!("s{i}"), size, (768, 768), 0.875, rng.random())
            .map_err(|e| e.to_string())?;
        let kinds: Vec<_> = plan.variants.iter().map(|v| v.variant_id).collect();
        ensure(
            kinds == [VariantKind::Identity, VariantKind::Hflip, VariantKind::Vflip, VariantKind::Crop],
            || format!("variants {kinds:?}"),
        )?;
        ensure(plan.variants[3].crop.is_some_and(|c| c.fits(size.0, size.1)), || "crop outside".into())?;
    }
    let names = ["identity", "hflip", "vflip", "crop"];
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let rows: Vec<ProbabilityVector> = names
            .iter()
            .map(|n| ProbabilityVector::new(format!("s{case}"), "img", *n, random_simplex(&mut rng)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let base = aggregate_tta(&rows).map_err(|e| e.to_string())?;
        worst = worst.max((base.probs.iter().sum::<f64>() - 1.0).abs());
        ensure(base.probs.iter().all(|p| (0.0..=1.0).contains(p)), || "entry outside [0,1]".into())?;
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let again = aggregate_tta(&shuffled).map_err(|e| e.to_string())?;
        ensure(again.probs == base.probs, || format!("case {case}: order changed the mean"))?;
    }
    ensure(worst <= 1e-9, || format!("sum off by {worst:e}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ann = fixtures().join("annotations.jsonl");
    let mut outputs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = dir.path().join(name);
        run_ecsp(&[
            "tta-plan", "--annotations", ann.to_str().unwrap(), "--split", "all",
            "--source", "1024x768", "--seed", "99", "--out", out.to_str().unwrap(),
        ])?;
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || "plans differ across processes".into())?;
    Ok(format!(
        "200 buffers, 1000 plans, 1000 aggregates (max |Σ-1| {worst:.1e}), 2 processes identical"
    ))
}

fn ensemble_math() -> Outcome {
    let head = |a: f64, b: f64| {
        let mut p = [0.0; NUM_CLASSES];
        p[0] = a;
        p[1] = b;
        p
    };
    let x = ProbabilityVector::new("s", "x", "identity", head(0.6, 0.4)).map_err(|e| e.to_string())?;
    let y = ProbabilityVector::new("s", "y", "identity", head(0.2, 0.8)).map_err(|e| e.to_string())?;
    let per_backend: BTreeMap<String, ProbabilityVector> =
        [("x".to_string(), x), ("y".to_string(), y)].into_iter().collect();
    let cfg = EnsembleConfig::parse("x = 0.7\ny = 0.3\n").map_err(|e| e.to_string())?;
    let fused = fuse("s", &per_backend, &cfg).map_err(|e| e.to_string())?;
    let want = head(0.48, 0.52);
    let err = fused.fused_probs.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(err <= 1e-12, || format!("hand example off by {err:e}"))?;
    ensure(fused.predicted.index() == 1, || "hand example argmax".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    for case in 0..10_000 {
        let n = rng.random_range(1..=5);
        let per_backend: BTreeMap<String, ProbabilityVector> = (0..n)
            .map(|b| {
                let id = format!("b{b}");
                let v = ProbabilityVector::new("s", id.clone(), "identity", random_simplex(&mut rng)).unwrap();
                (id, v)
            })
            .collect();
        let weights: BTreeMap<String, f64> =
            per_backend.keys().map(|k| (k.clone(), rng.random_range(0.01..10.0))).collect();
        let factor = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled = weights.iter().map(|(k, w)| (k.clone(), w * factor)).collect();
        let a = fuse("s", &per_backend, &EnsembleConfig::new(weights).unwrap()).map_err(|e| e.to_string())?;
        let b = fuse("s", &per_backend, &EnsembleConfig::new(scaled).unwrap()).map_err(|e| e.to_string())?;
        ensure(a.predicted == b.predicted, || format!("case {case}: argmax changed under rescaling"))?;
    }
    Ok(format!("hand example max err {err:.1e}, 10000 rescaling cases"))
}

/// 2tp / (2tp + fp + fn) per class; pooled counts for micro.
fn metrics_oracle(gold: &[usize], pred: &[usize]) -> [f64; 4] {
    let n = gold.len() as f64;
    let mut macro_sum = 0.0;
    let mut weighted_sum = 0.0;
    let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
    for c in 0..NUM_CLASSES {
        let tp = gold.iter().zip(pred).filter(|(&g, &p)| g == c && p == c).count() as f64;
        let fp = gold.iter().zip(pred).filter(|(&g, &p)| g != c && p == c).count() as f64;
        let fn_ = gold.iter().zip(pred).filter(|(&g, &p)| g == c && p != c).count() as f64;
        let den = 2.0 * tp + fp + fn_;
        let f1 = if den == 0.0 { 0.0 } else { 2.0 * tp / den };
        macro_sum += f1;
        weighted_sum += f1 * (tp + fn_);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64;
    [
        macro_sum / NUM_CLASSES as f64,
        2.0 * tp_all / (2.0 * tp_all + fp_all + fn_all),
        weighted_sum / n,
        correct / n,
    ]
}

fn metrics_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(1..=500);
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
        // mix of noise levels so both near-perfect and near-random sets occur
        let noise = rng.random_range(0.0..1.0);
        let pred: Vec<usize> = gold
            .iter()
            .map(|&g| if rng.random_range(0.0..1.0) < noise { rng.random_range(0..NUM_CLASSES) } else { g })
            .collect();
        let pairs: Vec<_> = gold
            .iter()
            .zip(&pred)
            .map(|(&g, &p)| (EmotionClass::from_index(g).unwrap(), EmotionClass::from_index(p).unwrap()))
            .collect();
        let s = metrics::score(&pairs).map_err(|e| e.to_string())?;
        let o = metrics_oracle(&gold, &pred);
        for (got, want) in [s.f1_macro, s.f1_micro, s.f1_weighted, s.accuracy].iter().zip(o) {
            worst = worst.max((got - want).abs());
        }
        ensure(s.accuracy == s.f1_micro, || format!("case {case}: accuracy != micro-F1"))?;
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 label sets, max deviation {worst:.1e}, accuracy == micro-F1"))
}

fn end_to_end(first: &Path, second: &Path) -> Outcome {
    let config = fixtures().join("run.toml");
    let mut times = Vec::new();
    for out in [first, second] {
        let started = Instant::now();
        run_ecsp(&["run", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])?;
        times.push(started.elapsed());
    }
    for f in ["predictions.jsonl", "scores.json", "report.txt", "retrievals.jsonl", "prompts.jsonl"] {
        let a = std::fs::read(first.join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    let slowest = times.iter().max().copied().unwrap_or_default();
    ensure(slowest < Duration::from_secs(5), || format!("run took {slowest:.2?}"))?;
    let n = std::fs::read_to_string(first.join("predictions.jsonl")).map_err(|e| e.to_string())?.lines().count();
    Ok(format!("{n} predictions byte-identical, slowest run {:.3} s", slowest.as_secs_f64()))
}

fn bit_patterns(e: &[JointEmbedding]) -> Vec<(String, Vec<u32>)> {
    e.iter().map(|x| (x.id().to_string(), x.joint().iter().map(|v| v.to_bits()).collect())).collect()
}

fn jsonl_stable<T>(path: &Path, scratch: &Path) -> Result<usize, String>
where
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq,
{
    let first: Vec<T> = read_jsonl(path).map_err(|e| e.to_string())?;
    let a = scratch.join("a.jsonl");
    let b = scratch.join("b.jsonl");
    write_jsonl(&first, &a).map_err(|e| e.to_string())?;
    let second: Vec<T> = read_jsonl(&a).map_err(|e| e.to_string())?;
    write_jsonl(&second, &b).map_err(|e| e.to_string())?;
    ensure(first == second, || format!("{}: values changed", path.display()))?;
    ensure(std::fs::read(&a).ok() == std::fs::read(&b).ok(), || format!("{}: text changed", path.display()))?;
    Ok(first.len())
}

fn format_round_trips(run_dir: &Path) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0009);
    let mut sets = vec![load_embeddings(&fixtures().join("embeddings.jsonl")).map_err(|e| e.to_string())?];
    for s in 0..200 {
        let (d_v, d_t) = (rng.random_range(1..64), rng.random_range(1..64));
        let n = rng.random_range(1..20);
        sets.push(
            (0..n)
                .map(|i| {
                    // raw bit patterns cover tiny, huge and subnormal values
                    let mut part = |d: usize| -> Vec<f32> {
                        (0..d)
                            .map(|_| loop {
                                let v = f32::from_bits(rng.random());
                                if v.is_finite() {
                                    break v;
                                }
                            })
                            .collect()
                    };
                    let (img, txt) = (part(d_v), part(d_t));
                    JointEmbedding::new(format!("set{s}-{i}"), img, txt).unwrap()
                })
                .collect(),
        );
    }
    for (i, set) in sets.iter().enumerate() {
        let text = dir.path().join("e.jsonl");
        let bin = dir.path().join("e.ecsp");
        write_embeddings_jsonl(set, &text).map_err(|e| e.to_string())?;
        write_embeddings_binary(set, &bin).map_err(|e| e.to_string())?;
        let from_text = load_embeddings(&text).map_err(|e| e.to_string())?;
        let from_bin = load_embeddings(&bin).map_err(|e| e.to_string())?;
        ensure(bit_patterns(&from_text) == bit_patterns(set), || format!("set {i}: text round trip"))?;
        ensure(bit_patterns(&from_bin) == bit_patterns(set), || format!("set {i}: binary round trip"))?;
        let repacked = encode_binary(&from_text).map_err(|e| e.to_string())?;
        ensure(Some(repacked.clone()) == std::fs::read(&bin).ok(), || format!("set {i}: text->binary bytes"))?;
        ensure(decode_binary(&repacked).is_ok(), || format!("set {i}: decode"))?;
    }

    let scratch = dir.path();
    let mut rows = 0;
    rows += jsonl_stable::<AnnotationRecord>(&fixtures().join("annotations.jsonl"), scratch)?;
    rows += jsonl_stable::<RetrievalOutcome>(&run_dir.join("retrievals.jsonl"), scratch)?;
    rows += jsonl_stable::<PromptArtifact>(&run_dir.join("prompts.jsonl"), scratch)?;
    rows += jsonl_stable::<TtaPlan>(&run_dir.join("tta_plans.jsonl"), scratch)?;
    rows += jsonl_stable::<ProbabilityVector>(&run_dir.join("probabilities.jsonl"), scratch)?;
    rows += jsonl_stable::<Prediction>(&run_dir.join("predictions.jsonl"), scratch)?;
    let score_text = std::fs::read_to_string(run_dir.join("scores.json")).map_err(|e| e.to_string())?;
    let score: ScoreRecord = serde_json::from_str(&score_text).map_err(|e| e.to_string())?;
    let again: ScoreRecord =
        serde_json::from_str(&serde_json::to_string(&score).unwrap()).map_err(|e| e.to_string())?;
    ensure(score == again, || "score record changed".into())?;
    Ok(format!("{} embedding sets bit-exact, {rows} JSONL rows over 6 formats stable", sets.len()))
}

fn main() -> ExitCode {
    let runs = tempfile::tempdir().expect("temp dir");
    let (first, second) = (runs.path().join("first"), runs.path().join("second"));

    let criteria: Vec<(&str, Check)> = vec![
        ("retrieval oracle equivalence", Box::new(retrieval_oracle)),
        ("threshold semantics", Box::new(threshold_semantics)),
        ("leave-one-out", Box::new(leave_one_out)),
        ("prompt goldens", Box::new(prompt_goldens)),
        ("tta properties", Box::new(tta_properties)),
        ("ensemble math", Box::new(ensemble_math)),
        ("metrics oracle", Box::new(metrics_agreement)),
        ("end-to-end determinism", Box::new(|| end_to_end(&first, &second))),
        ("format round trips", Box::new(|| format_round_trips(&first))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name:<30} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<30} {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
