//! Normalized edit distance, repetition detection and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::synth::{LayoutKind, Sample};

/// Unnormalized Levenshtein distance (unit insert/delete/substitute costs).
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(a, b) / max(|a|, |b|, 1)`.
pub fn edit_distance(a: &[usize], b: &[usize]) -> f64 {
    levenshtein(a, b) as f64 / a.len().max(b.len()).max(1) as f64
}

/// True iff some block of `g ≥ min_gram` tokens occurs at least `min_repeats`
/// times back-to-back somewhere in `s`.
pub fn detect_repetition(s: &[usize], min_gram: usize, min_repeats: usize) -> bool {
    let min_gram = min_gram.max(1);
    if min_repeats <= 1 {
        return s.len() >= min_gram;
    }
    // A block of length g repeated r times is a window of length g·r with
    // period g, i.e. a run of g·(r-1) positions where s[p] == s[p+g].
    let mut g = min_gram;
    while g * min_repeats <= s.len() {
        let need = g * (min_repeats - 1);
        let mut run = 0;
        for p in 0..s.len() - g {
            if s[p] == s[p + g] {
                run += 1;
                if run >= need {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        g += 1;
    }
    false
}

/// Something that reads a sample's image and produces token ids.
pub trait Transcriber {
    fn transcribe(&self, sample: &Sample) -> Result<Vec<usize>>;
}

/// Returns each sample's own target.
pub struct EchoTranscriber;

impl Transcriber for EchoTranscriber {
    fn transcribe(&self, sample: &Sample) -> Result<Vec<usize>> {
        Ok(sample.target.clone())
    }
}

/// Returns the same ids for every sample.
pub struct ConstantTranscriber(pub Vec<usize>);

impl Transcriber for ConstantTranscriber {
    fn transcribe(&self, _sample: &Sample) -> Result<Vec<usize>> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSettings {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub min_gram: usize,
    pub min_repeats: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            pad: 0,
            bos: 1,
            eos: 2,
            min_gram: 5,
            min_repeats: 4,
        }
    }
}

impl EvalSettings {
    /// Content tokens: everything up to the first eos, specials removed.
    pub fn content(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter()
            .copied()
            .skip_while(|&t| t == self.bos)
            .take_while(|&t| t != self.eos)
            .filter(|&t| t != self.pad && t != self.bos)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub layout: LayoutKind,
    pub edit_distance: f64,
    pub exact_match: bool,
    pub repeated: bool,
    /// Set when transcription failed; the sample then scores edit distance 1.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub mean_edit_distance: f64,
    pub exact_match_rate: f64,
    pub repetition_rate: f64,
    pub failures: usize,
}

impl Aggregate {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a SampleRecord>) -> Aggregate {
        let (mut n, mut ed, mut em, mut rep, mut fail) = (0usize, 0.0, 0usize, 0usize, 0usize);
        for r in records {
            n += 1;
            ed += r.edit_distance;
            em += usize::from(r.exact_match);
            rep += usize::from(r.repeated);
            fail += usize::from(r.error.is_some());
        }
        let d = n.max(1) as f64;
        Aggregate {
            count: n,
            mean_edit_distance: ed / d,
            exact_match_rate: em as f64 / d,
            repetition_rate: rep as f64 / d,
            failures: fail,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config_digest: Option<String>,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn overall(&self) -> Aggregate {
        Aggregate::of(&self.records)
    }

    pub fn by_layout(&self) -> BTreeMap<LayoutKind, Aggregate> {
        let mut kinds: Vec<LayoutKind> = self.records.iter().map(|r| r.layout).collect();
        kinds.sort();
        kinds.dedup();
        kinds
            .into_iter()
            .map(|k| (k, Aggregate::of(self.records.iter().filter(|r| r.layout == k))))
            .collect()
    }

    pub fn layout(&self, kind: LayoutKind) -> Option<Aggregate> {
        self.by_layout().get(&kind).copied()
    }

    /// Line-oriented text: header, one `sample` line per record, then `aggregate` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("eval-report v1\n");
        if let Some(d) = &self.config_digest {
            let _ = writeln!(s, "config_digest {d}");
        }
        for r in &self.records {
            let _ = write!(
                s,
                "sample index={} seed={} layout={} ed={} exact={} repeated={}",
                r.index,
                r.seed,
                r.layout,
                r.edit_distance,
                u8::from(r.exact_match),
                u8::from(r.repeated)
            );
            match &r.error {
                Some(e) => {
                    let _ = writeln!(s, " status=error:{}", e.replace(char::is_whitespace, "_"));
                }
                None => s.push_str(" status=ok\n"),
            }
        }
        let write_agg = |s: &mut String, scope: &str, a: Aggregate| {
            let _ = writeln!(
                s,
                "aggregate scope={scope} count={} mean_ed={} exact_match={} repetition_rate={} failures={}",
                a.count, a.mean_edit_distance, a.exact_match_rate, a.repetition_rate, a.failures
            );
        };
        write_agg(&mut s, "all", self.overall());
        for (k, a) in self.by_layout() {
            write_agg(&mut s, k.as_str(), a);
        }
        s
    }

    /// Parses the per-sample lines of [`EvalReport::to_text`]; aggregate lines are ignored.
    pub fn from_text(text: &str) -> Result<EvalReport> {
        let mut lines = text.lines();
        if lines.next() != Some("eval-report v1") {
            return Err(Error::Parse("missing eval-report header".into()));
        }
        let mut report = EvalReport {
            config_digest: None,
            records: Vec::new(),
        };
        for line in lines {
            if let Some(d) = line.strip_prefix("config_digest ") {
                report.config_digest = Some(d.to_string());
            } else if let Some(rest) = line.strip_prefix("sample ") {
                let fields: BTreeMap<&str, &str> = rest
                    .split(' ')
                    .filter_map(|kv| kv.split_once('='))
                    .collect();
                let get = |k: &str| {
                    fields
                        .get(k)
                        .copied()
                        .ok_or_else(|| Error::Parse(format!("sample line lacks `{k}`: {line}")))
                };
                let num = |k: &str| -> Result<u64> {
                    get(k)?.parse().map_err(|_| Error::Parse(format!("bad `{k}` in {line}")))
                };
                let status = get("status")?;
                report.records.push(SampleRecord {
                    index: num("index")? as usize,
                    seed: num("seed")?,
                    layout: get("layout")?.parse()?,
                    edit_distance: get("ed")?
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad ed in {line}")))?,
                    exact_match: num("exact")? == 1,
                    repeated: num("repeated")? == 1,
                    error: status.strip_prefix("error:").map(str::to_string),
                });
            }
        }
        Ok(report)
    }
}

/// Transcribes every sample in order. A failing sample is recorded with its
/// error and never aborts the run.
pub fn evaluate<M: Transcriber + ?Sized>(
    model: &M,
    samples: &[Sample],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let records = samples
        .iter()
        .enumerate()
        .map(|(index, sample)| {
            let target = settings.content(&sample.target);
            let base = SampleRecord {
                index,
                seed: sample.seed,
                layout: sample.layout,
                edit_distance: 1.0,
                exact_match: false,
                repeated: false,
                error: None,
            };
            match model.transcribe(sample) {
                Ok(ids) => {
                    let out = settings.content(&ids);
                    SampleRecord {
                        edit_distance: edit_distance(&out, &target),
                        exact_match: out == target,
                        repeated: detect_repetition(&out, settings.min_gram, settings.min_repeats),
                        ..base
                    }
                }
                Err(e) => SampleRecord {
                    error: Some(e.to_string()),
                    ..base
                },
            }
        })
        .collect();
    Ok(EvalReport {
        config_digest: None,
        records,
    })
}
