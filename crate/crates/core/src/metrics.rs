//! Caption evaluation: the reference-relative corpus CLIP score and BLEU@4.
//!
//! The CLIP score here is the fraction, averaged per image and then over the
//! corpus, of reference captions whose image similarity the generated caption
//! matches or beats — 0.5 means parity with the references. Similarities are
//! raw backend cosines; ties count in the model's favor. BLEU@4 is the usual
//! corpus metric: uniform weights over n = 1..4 clipped n-gram precisions
//! with a brevity penalty, smoothing off unless requested.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluated image: the generated caption, its references, and the
/// precomputed image-text similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    /// Generated caption in text form.
    pub generated: String,
    /// Mᵢ ≥ 1 reference captions.
    pub references: Vec<String>,
    /// Image-generated similarity gᵢ.
    pub g: f64,
    /// Image-reference similarities rᵢⱼ, one per reference.
    pub r: Vec<f64>,
}

impl EvalRecord {
    pub fn new(
        image_id: impl Into<String>,
        generated: impl Into<String>,
        references: Vec<String>,
        g: f64,
        r: Vec<f64>,
    ) -> Result<Self> {
        let record = EvalRecord {
            image_id: image_id.into(),
            generated: generated.into(),
            references,
            g,
            r,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(Error::Parameter(format!(
                "record `{}` has no reference captions",
                self.image_id
            )));
        }
        if self.r.len() != self.references.len() {
            return Err(Error::Shape(format!(
                "record `{}` has {} references but {} reference similarities",
                self.image_id,
                self.references.len(),
                self.r.len()
            )));
        }
        if !self.g.is_finite() || self.r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "record `{}` contains non-finite similarities",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// Fraction of references the generated caption matches or beats:
/// (1/Mᵢ) Σⱼ 1[g ≥ rᵢⱼ].
pub fn per_image_fraction(g: f64, r: &[f64]) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::Parameter(
            "per-image fraction needs at least one reference similarity".into(),
        ));
    }
    let wins = r.iter().filter(|&&rij| g >= rij).count();
    Ok(wins as f64 / r.len() as f64)
}

/// Corpus score: the unweighted mean of per-image fractions, so images with
/// different reference counts contribute equally.
pub fn clip_score(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation(
            "clip score over an empty record set".into(),
        ));
    }
    let mut sum = 0.0;
    for record in records {
        record.validate()?;
        sum += per_image_fraction(record.g, &record.r)?;
    }
    Ok(sum / records.len() as f64)
}

/// Evaluation tokenization: lowercase, punctuation treated as separators,
/// then whitespace splitting.
pub fn eval_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Zero-numerator handling for the modified precisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Smoothing {
    /// Any zero precision makes the whole score zero.
    #[default]
    None,
    /// A zero numerator is replaced by `eps` (the denominator is kept), so
    /// tiny corpora with no higher-order matches still produce a signal.
    Epsilon { eps: f64 },
}

fn clipped_ngram_matches(candidate: &[String], refs: &[Vec<String>], n: usize) -> usize {
    if candidate.len() < n {
        return 0;
    }
    let mut cand_counts: HashMap<&[String], usize> = HashMap::new();
    for gram in candidate.windows(n) {
        *cand_counts.entry(gram).or_insert(0) += 1;
    }
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in refs {
        if r.len() < n {
            continue;
        }
        let mut counts: HashMap<&[String], usize> = HashMap::new();
        for gram in r.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
        for (gram, c) in counts {
            let e = max_ref.entry(gram).or_insert(0);
            *e = (*e).max(c);
        }
    }
    cand_counts
        .iter()
        .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum()
}

/// Corpus-level BLEU@4 over pre-tokenized sentences.
///
/// The effective reference length uses the closest reference per sentence,
/// ties resolved toward the shorter one. When a candidate set is so short
/// that some order n has no n-grams anywhere, that precision is zero and the
/// score is zero regardless of smoothing — smoothing only rescues zero
/// numerators over a nonzero denominator.
pub fn bleu4(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    smoothing: Smoothing,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyEvaluation(
            "BLEU over an empty candidate set".into(),
        ));
    }
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates vs {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    let mut numerators = [0usize; 4];
    let mut denominators = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Parameter(
                "every candidate needs at least one reference".into(),
            ));
        }
        cand_len += cand.len();
        let closest = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("refs nonempty");
        ref_len += closest;
        for (i, (num, den)) in numerators.iter_mut().zip(&mut denominators).enumerate() {
            let n = i + 1;
            *num += clipped_ngram_matches(cand, refs, n);
            *den += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for (&num, &den) in numerators.iter().zip(&denominators) {
        if den == 0 {
            return Ok(0.0);
        }
        let p = if num > 0 {
            num as f64 / den as f64
        } else {
            match smoothing {
                Smoothing::None => return Ok(0.0),
                Smoothing::Epsilon { eps } => eps / den as f64,
            }
        };
        log_sum += 0.25 * p.ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

/// BLEU@4 over the caption text carried by evaluation records, using the
/// standard evaluation tokenization.
pub fn bleu4_from_records(records: &[EvalRecord], smoothing: Smoothing) -> Result<f64> {
    let candidates: Vec<Vec<String>> = records.iter().map(|r| eval_tokenize(&r.generated)).collect();
    let references: Vec<Vec<Vec<String>>> = records
        .iter()
        .map(|r| r.references.iter().map(|s| eval_tokenize(s)).collect())
        .collect();
    bleu4(&candidates, &references, smoothing)
}

/// Per-image line of a [`ScoreReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageScore {
    pub image_id: String,
    pub fraction: f64,
    pub g: f64,
    pub r: Vec<f64>,
}

/// Corpus evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub s_clip: f64,
    pub bleu4: f64,
    pub per_image: Vec<PerImageScore>,
    pub n: usize,
}

impl ScoreReport {
    pub fn from_records(records: &[EvalRecord], smoothing: Smoothing) -> Result<Self> {
        let s_clip = clip_score(records)?;
        let bleu = bleu4_from_records(records, smoothing)?;
        let per_image = records
            .iter()
            .map(|rec| {
                Ok(PerImageScore {
                    image_id: rec.image_id.clone(),
                    fraction: per_image_fraction(rec.g, &rec.r)?,
                    g: rec.g,
                    r: rec.r.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreReport {
            s_clip,
            bleu4: bleu,
            per_image,
            n: records.len(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    /// One row per image: image_id, fraction, g, max_r.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "image_id,fraction,g,max_r")?;
        for row in &self.per_image {
            let max_r = row.r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            writeln!(
                file,
                "{},{},{},{}",
                csv_field(&row.image_id),
                row.fraction,
                row.g,
                max_r
            )?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reads the evaluation manifest: a JSON list of records, each validated.
pub fn read_eval_manifest(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = BufReader::new(File::open(path)?);
    let records: Vec<EvalRecord> = serde_json::from_reader(file)?;
    for record in &records {
        record.validate()?;
    }
    Ok(records)
}

pub fn write_eval_manifest(path: &Path, records: &[EvalRecord]) -> Result<()> {
    for record in records {
        record.validate()?;
    }
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, records)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn record(id: &str, g: f64, r: Vec<f64>) -> EvalRecord {
        let refs = (0..r.len()).map(|j| format!("ref {j}")).collect();
        EvalRecord::new(id, "generated text", refs, g, r).unwrap()
    }

    #[test]
    fn fraction_examples() {
        assert_eq!(per_image_fraction(0.5, &[0.4, 0.6]).unwrap(), 0.5);
        assert_eq!(per_image_fraction(0.7, &[0.7, 0.7, 0.7]).unwrap(), 1.0);
        // count by hand: 0.31 beats 0.30 and 0.10 and ties 0.31 -> 3 of 5
        assert_eq!(
            per_image_fraction(0.31, &[0.30, 0.31, 0.32, 0.40, 0.10]).unwrap(),
            3.0 / 5.0
        );
        assert!(matches!(
            per_image_fraction(0.5, &[]),
            Err(Error::Parameter(_))
        ));
    }

    /// Scoring a gold caption as if it were generated ties itself among the
    /// references, so with five references per image the corpus score can
    /// never fall below 1/5.
    #[test]
    fn gold_candidates_respect_the_self_tie_floor() {
        let mut rng = crate::rng::SeededRng::from_seed_u64(61);
        let records: Vec<EvalRecord> = (0..40)
            .map(|i| {
                let r: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
                let own = rng.below(5) as usize;
                record(&format!("img-{i}"), r[own], r)
            })
            .collect();
        assert!(clip_score(&records).unwrap() >= 0.2);
    }

    #[test]
    fn clip_score_bounds_and_self_tie() {
        let records = vec![
            record("a", 0.9, vec![0.1, 0.2]),
            record("b", 0.8, vec![0.3]),
        ];
        assert_eq!(clip_score(&records).unwrap(), 1.0);

        // generated equals one of the references -> at least 1/M per image
        let records = vec![record("c", 0.4, vec![0.4, 0.9, 0.9])];
        assert!(clip_score(&records).unwrap() >= 1.0 / 3.0);

        assert!(matches!(
            clip_score(&[]),
            Err(Error::EmptyEvaluation(_))
        ));
    }

    /// Brute-force double loop written directly from the corpus-score
    /// definition, kept structurally independent of the implementation.
    fn brute_force_clip(records: &[EvalRecord]) -> f64 {
        let mut outer = 0.0;
        for rec in records {
            let mut inner = 0;
            for &rij in &rec.r {
                if rec.g >= rij {
                    inner += 1;
                }
            }
            outer += inner as f64 / rec.r.len() as f64;
        }
        outer / records.len() as f64
    }

    #[test]
    fn clip_score_matches_brute_force_exactly() {
        let mut rng = SeededRng::from_seed_u64(404);
        for _ in 0..1000 {
            let n = 1 + rng.below(20) as usize;
            let records: Vec<EvalRecord> = (0..n)
                .map(|i| {
                    let m = 1 + rng.below(5) as usize;
                    // quantized similarities so ties actually occur
                    let g = rng.below(11) as f64 / 10.0;
                    let r: Vec<f64> = (0..m).map(|_| rng.below(11) as f64 / 10.0).collect();
                    record(&format!("img-{i}"), g, r)
                })
                .collect();
            let fast = clip_score(&records).unwrap();
            let slow = brute_force_clip(&records);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn bleu_perfect_match_is_one() {
        let c = vec![toks("birds fly high in the sky")];
        let r = vec![vec![toks("birds fly high in the sky")]];
        assert_eq!(bleu4(&c, &r, Smoothing::None).unwrap(), 1.0);
    }

    #[test]
    fn bleu_disjoint_unigrams_is_zero() {
        let c = vec![toks("alpha beta gamma delta")];
        let r = vec![vec![toks("one two three four five")]];
        assert_eq!(bleu4(&c, &r, Smoothing::None).unwrap(), 0.0);
    }

    #[test]
    fn bleu_matches_independent_oracle() {
        // Values computed beforehand with a standalone script implementing
        // the BLEU formula (clipped n-gram precisions, uniform 1/4 weights,
        // closest-reference brevity penalty), then frozen here.
        let corpus_c = vec![
            toks("the cat sat on the mat"),
            toks("a dog runs fast"),
            toks("birds fly high in the sky"),
        ];
        let corpus_r = vec![
            vec![toks("the cat sat on a mat"), toks("a cat was sitting on the mat")],
            vec![toks("the dog runs very fast")],
            vec![toks("birds fly high in the sky")],
        ];
        let got = bleu4(&corpus_c, &corpus_r, Smoothing::None).unwrap();
        assert!((got - 0.6930043156721666).abs() < 1e-12, "{got}");

        let got = bleu4(&corpus_c[..1].to_vec(), &corpus_r[..1].to_vec(), Smoothing::None).unwrap();
        assert!((got - 0.6756000774035172).abs() < 1e-12, "{got}");

        // short candidate: brevity penalty exp(1 - 8/5) fires
        let c = vec![toks("the small cat sat down")];
        let r = vec![vec![toks("the very small cat sat down quietly today")]];
        let got = bleu4(&c, &r, Smoothing::None).unwrap();
        assert!((got - 0.3880684294761698).abs() < 1e-12, "{got}");
    }

    #[test]
    fn epsilon_smoothing_rescues_zero_numerators() {
        let c = vec![toks("red green blue yellow")];
        let r = vec![vec![toks("red green purple blue yellow")]];
        assert_eq!(bleu4(&c, &r, Smoothing::None).unwrap(), 0.0);
        let got = bleu4(&c, &r, Smoothing::Epsilon { eps: 0.1 }).unwrap();
        assert!((got - 0.18713114109010565).abs() < 1e-12, "{got}");
    }

    #[test]
    fn bleu_edge_cases() {
        assert!(matches!(
            bleu4(&[], &[], Smoothing::None),
            Err(Error::EmptyEvaluation(_))
        ));
        // all candidates shorter than four tokens: no 4-gram denominator
        let c = vec![toks("one two")];
        let r = vec![vec![toks("one two")]];
        assert_eq!(bleu4(&c, &r, Smoothing::Epsilon { eps: 0.1 }).unwrap(), 0.0);
        // empty candidate sentences alone
        let c = vec![Vec::new()];
        let r = vec![vec![toks("anything here")]];
        assert_eq!(bleu4(&c, &r, Smoothing::None).unwrap(), 0.0);
    }

    #[test]
    fn tokenization_is_lowercase_and_punctuation_free() {
        assert_eq!(
            eval_tokenize("The CAT, sat!  On (the) mat."),
            toks("the cat sat on the mat")
        );
        assert_eq!(eval_tokenize("...!?"), Vec::<String>::new());
    }

    #[test]
    fn report_round_trips_and_csv_rows_match() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            EvalRecord::new(
                "img-1",
                "the cat sat on the mat",
                vec!["the cat sat on a mat".into()],
                0.8,
                vec![0.7],
            )
            .unwrap(),
            EvalRecord::new(
                "img,2",
                "a dog runs very fast",
                vec!["the dog runs very fast".into(), "dogs run".into()],
                0.5,
                vec![0.6, 0.4],
            )
            .unwrap(),
        ];
        let manifest = dir.path().join("eval.json");
        write_eval_manifest(&manifest, &records).unwrap();
        assert_eq!(read_eval_manifest(&manifest).unwrap(), records);

        let report = ScoreReport::from_records(&records, Smoothing::None).unwrap();
        assert_eq!(report.n, 2);
        let mean: f64 =
            report.per_image.iter().map(|p| p.fraction).sum::<f64>() / report.n as f64;
        assert_eq!(report.s_clip, mean);

        let json_path = dir.path().join("report.json");
        report.write_json(&json_path).unwrap();
        let back: ScoreReport =
            serde_json::from_reader(File::open(&json_path).unwrap()).unwrap();
        assert_eq!(back, report);

        let csv_path = dir.path().join("report.csv");
        report.write_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "image_id,fraction,g,max_r");
        assert_eq!(lines[1], "img-1,1,0.8,0.7");
        assert_eq!(lines[2], "\"img,2\",0.5,0.5,0.6");
    }

    #[test]
    fn invalid_manifest_records_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"[{"image_id":"x","generated":"a","references":["b"],"g":0.2,"r":[0.1,0.3]}]"#,
        )
        .unwrap();
        assert!(matches!(read_eval_manifest(&path), Err(Error::Shape(_))));
        assert!(EvalRecord::new("x", "a", vec![], 0.1, vec![]).is_err());
        assert!(EvalRecord::new("x", "a", vec!["b".into()], f64::NAN, vec![0.1]).is_err());
    }

    proptest! {
        #[test]
        fn s_clip_stays_in_unit_interval_and_ignores_order(
            seed in 0u64..500,
            swap_a in 0usize..8,
            swap_b in 0usize..8,
        ) {
            let mut rng = SeededRng::from_seed_u64(seed);
            let n = 2 + rng.below(7) as usize;
            let mut records: Vec<EvalRecord> = (0..n)
                .map(|i| {
                    let m = 1 + rng.below(4) as usize;
                    let g = rng.uniform();
                    let r: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
                    record(&format!("p{i}"), g, r)
                })
                .collect();
            let base = clip_score(&records).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));

            // permuting a reference list leaves every fraction untouched
            let m0 = records[0].r.len();
            records[0].r.rotate_left(swap_a % m0);
            prop_assert_eq!(clip_score(&records).unwrap(), base);

            // permuting records only reorders an f64 sum: equal to 1 ulp
            records.swap(swap_a % n, swap_b % n);
            prop_assert!((clip_score(&records).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn raising_g_never_lowers_the_score(seed in 0u64..500) {
            let mut rng = SeededRng::from_seed_u64(seed);
            let n = 1 + rng.below(6) as usize;
            let mut records: Vec<EvalRecord> = (0..n)
                .map(|i| {
                    let m = 1 + rng.below(4) as usize;
                    let r: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
                    record(&format!("m{i}"), rng.uniform(), r)
                })
                .collect();
            let base = clip_score(&records).unwrap();
            let idx = rng.below(n as u64) as usize;
            records[idx].g += rng.uniform();
            prop_assert!(clip_score(&records).unwrap() >= base);
        }

        #[test]
        fn replacing_a_reference_with_g_never_lowers_the_score(seed in 0u64..500) {
            let mut rng = SeededRng::from_seed_u64(seed);
            let n = 1 + rng.below(6) as usize;
            let mut records: Vec<EvalRecord> = (0..n)
                .map(|i| {
                    let m = 1 + rng.below(4) as usize;
                    let r: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
                    record(&format!("t{i}"), rng.uniform(), r)
                })
                .collect();
            let base = clip_score(&records).unwrap();
            let idx = rng.below(n as u64) as usize;
            let jdx = rng.below(records[idx].r.len() as u64) as usize;
            records[idx].r[jdx] = records[idx].g;
            prop_assert!(clip_score(&records).unwrap() >= base);
        }

        #[test]
        fn identity_corpus_scores_one(seed in 0u64..200) {
            let mut rng = SeededRng::from_seed_u64(seed);
            let n = 1 + rng.below(5) as usize;
            let sentences: Vec<Vec<String>> = (0..n)
                .map(|_| {
                    let len = 4 + rng.below(6) as usize;
                    (0..len).map(|_| format!("w{}", rng.below(10))).collect()
                })
                .collect();
            let refs: Vec<Vec<Vec<String>>> =
                sentences.iter().map(|s| vec![s.clone()]).collect();
            prop_assert_eq!(bleu4(&sentences, &refs, Smoothing::None).unwrap(), 1.0);
        }
    }
}
