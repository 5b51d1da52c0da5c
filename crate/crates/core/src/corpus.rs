//! Clip bookkeeping: annotations, cleaning, pseudo-interval sampling over
//! unlabeled gaps, the chunked annotation-budget protocol and JSONL I/O.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::Grammar;
use crate::world::{narrate_event, VideoRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    Rephrased,
    Narrated,
}

/// A narrated interval `[t, e)` of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipAnnotation {
    pub video_id: String,
    pub t: usize,
    pub e: usize,
    pub narration: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub score: Option<f64>,
}

impl ClipAnnotation {
    pub fn len(&self) -> usize {
        self.e - self.t
    }

    pub fn is_empty(&self) -> bool {
        self.e <= self.t
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.narration.split_whitespace().collect()
    }

    pub fn interval(&self) -> Interval {
        Interval { t: self.t, e: self.e }
    }

    pub fn clip(&self) -> ClipRef {
        ClipRef {
            video_id: self.video_id.clone(),
            t: self.t,
            e: self.e,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub t: usize,
    pub e: usize,
}

impl Interval {
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.t < other.e && other.t < self.e
    }
}

/// A clip position without a narration.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClipRef {
    pub video_id: String,
    pub t: usize,
    pub e: usize,
}

/// Ground-truth annotations for every annotated event of every video.
pub fn ground_truth_annotations(videos: &[VideoRecord], grammar: &Grammar) -> Result<Vec<ClipAnnotation>> {
    let mut out = Vec::new();
    for v in videos {
        for ev in &v.events {
            out.push(ClipAnnotation {
                video_id: v.id.clone(),
                t: ev.t,
                e: ev.e,
                narration: narrate_event(&ev.event, grammar)?.join(" "),
                provenance: Provenance::GroundTruth,
                score: None,
            });
        }
    }
    Ok(out)
}

const UNSURE_TAGS: [&str; 2] = ["#unsure", "#Unsure"];
const MIN_WORDS: usize = 4;

fn keep_narration(narration: &str) -> bool {
    !UNSURE_TAGS.iter().any(|tag| narration.contains(tag))
        && narration.split_whitespace().count() >= MIN_WORDS
}

/// Drop narrations tagged as unsure or shorter than four words.
pub fn clean_narrations(annotations: Vec<ClipAnnotation>) -> Vec<ClipAnnotation> {
    annotations
        .into_iter()
        .filter(|a| keep_narration(&a.narration))
        .collect()
}

/// Mean ground-truth clip duration in frames.
pub fn average_clip_duration(annotations: &[ClipAnnotation]) -> Result<f64> {
    if annotations.is_empty() {
        return Err(Error::Domain("average duration of an empty annotation set".into()));
    }
    let total: usize = annotations.iter().map(|a| a.e - a.t).sum();
    Ok(total as f64 / annotations.len() as f64)
}

/// Pseudo-clip length and stride, both in frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSampler {
    pub delta: f64,
    pub stride: f64,
}

impl ClipSampler {
    pub fn new(delta: f64) -> Result<Self> {
        Self::with_stride(delta, delta)
    }

    pub fn with_stride(delta: f64, stride: f64) -> Result<Self> {
        if !(delta > 0.0 && stride > 0.0) {
            return Err(Error::Domain("clip duration and stride must be positive".into()));
        }
        Ok(Self { delta, stride })
    }

    pub fn from_annotations(annotations: &[ClipAnnotation]) -> Result<Self> {
        Self::new(average_clip_duration(annotations)?)
    }

    /// Δ rounded to the nearest whole frame, at least 1.
    pub fn clip_len(&self) -> usize {
        (self.delta.round() as usize).max(1)
    }

    pub fn stride_len(&self) -> usize {
        (self.stride.round() as usize).max(1)
    }
}

/// Maximal sub-intervals of `[0, len)` not covered by `covered`.
pub fn gaps(len: usize, covered: &[Interval]) -> Vec<Interval> {
    let mut sorted: Vec<Interval> = covered.to_vec();
    sorted.sort();
    let mut out = Vec::new();
    let mut cursor = 0;
    for iv in sorted {
        if iv.t > cursor {
            out.push(Interval { t: cursor, e: iv.t.min(len) });
        }
        cursor = cursor.max(iv.e);
        if cursor >= len {
            break;
        }
    }
    if cursor < len {
        out.push(Interval { t: cursor, e: len });
    }
    out.retain(|g| g.e > g.t);
    out
}

/// Tile each unlabeled gap of `video` with clips of length Δ, anchored at
/// the gap's left edge and stepping by the sampler stride. Clips that would
/// run past the gap end are dropped.
pub fn sample_pseudo_intervals(
    video: &VideoRecord,
    annotations: &[ClipAnnotation],
    sampler: &ClipSampler,
) -> Vec<Interval> {
    let covered: Vec<Interval> = annotations
        .iter()
        .filter(|a| a.video_id == video.id)
        .map(ClipAnnotation::interval)
        .collect();
    tile_gaps(video.num_frames(), &covered, sampler)
}

pub fn tile_gaps(len: usize, covered: &[Interval], sampler: &ClipSampler) -> Vec<Interval> {
    let (clip, stride) = (sampler.clip_len(), sampler.stride_len());
    let mut out = Vec::new();
    if clip > len {
        return out;
    }
    for gap in gaps(len, covered) {
        let mut t = gap.t;
        while t + clip <= gap.e {
            out.push(Interval { t, e: t + clip });
            t += stride;
        }
    }
    out
}

/// Where the chunked protocol expects pseudo-captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedRegions {
    pub chunk_len: usize,
    pub keep_every: usize,
    /// Mean ground-truth clips per kept chunk, rounded.
    pub clips_per_chunk: usize,
    /// Mean kept clip length, rounded, at least 1.
    pub clip_len: usize,
    pub clips: Vec<ClipRef>,
}

impl SkippedRegions {
    /// Whether frame `t` lies in a chunk whose annotations were kept.
    pub fn in_kept_chunk(&self, t: usize) -> bool {
        (t / self.chunk_len) % self.keep_every == 0
    }
}

/// Keep only annotations starting in every `keep_every`-th chunk of
/// `chunk_len` frames; emit evenly spaced unlabeled clips in the skipped
/// chunks, matching the kept chunks' clip count and length.
pub fn chunk_subset(
    videos: &[VideoRecord],
    annotations: &[ClipAnnotation],
    chunk_len: usize,
    keep_every: usize,
) -> Result<(Vec<ClipAnnotation>, SkippedRegions)> {
    if chunk_len == 0 || keep_every == 0 {
        return Err(Error::Domain("chunk_len and keep_every must be positive".into()));
    }
    let kept_chunk = |t: usize| (t / chunk_len) % keep_every == 0;
    let kept: Vec<ClipAnnotation> = annotations.iter().filter(|a| kept_chunk(a.t)).cloned().collect();

    let mut kept_chunks = 0usize;
    let mut lengths: BTreeMap<&str, usize> = BTreeMap::new();
    for v in videos {
        let n_chunks = v.num_frames().div_ceil(chunk_len);
        kept_chunks += (0..n_chunks).filter(|c| c % keep_every == 0).count();
        lengths.insert(&v.id, v.num_frames());
    }
    let clips_per_chunk = if kept_chunks == 0 {
        0
    } else {
        (kept.len() as f64 / kept_chunks as f64).round() as usize
    };
    let clip_len = if kept.is_empty() {
        1
    } else {
        (average_clip_duration(&kept)?.round() as usize).max(1)
    };

    let mut clips = Vec::new();
    if keep_every > 1 && clips_per_chunk > 0 {
        for (id, &len) in &lengths {
            let n_chunks = len.div_ceil(chunk_len);
            for c in (0..n_chunks).filter(|c| c % keep_every != 0) {
                let c0 = c * chunk_len;
                let c1 = ((c + 1) * chunk_len).min(len);
                let span = c1 - c0;
                if span < clip_len {
                    continue;
                }
                for k in 0..clips_per_chunk {
                    let t = (c0 + k * span / clips_per_chunk).min(c1 - clip_len);
                    clips.push(ClipRef {
                        video_id: id.to_string(),
                        t,
                        e: t + clip_len,
                    });
                }
            }
        }
    }
    Ok((
        kept,
        SkippedRegions {
            chunk_len,
            keep_every,
            clips_per_chunk,
            clip_len,
            clips,
        },
    ))
}

/// Write one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read one JSON value per non-blank line; failures report the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, annotations: &[ClipAnnotation]) -> Result<()> {
    write_jsonl(path, annotations)
}

pub fn load_corpus(path: &Path) -> Result<Vec<ClipAnnotation>> {
    read_jsonl(path)
}

pub fn save_videos(path: &Path, videos: &[VideoRecord]) -> Result<()> {
    write_jsonl(path, videos)
}

pub fn load_videos(path: &Path) -> Result<Vec<VideoRecord>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};
    use proptest::prelude::*;

    fn ann(video: &str, t: usize, e: usize, narration: &str) -> ClipAnnotation {
        ClipAnnotation {
            video_id: video.into(),
            t,
            e,
            narration: narration.into(),
            provenance: Provenance::GroundTruth,
            score: None,
        }
    }

    #[test]
    fn cleaning_drops_unsure_and_short() {
        let input = vec![
            ann("v", 0, 1, "C opens the door"),
            ann("v", 1, 2, "#unsure"),
            ann("v", 2, 3, "C walks"),
            ann("v", 3, 4, "C picks up the #Unsure thing"),
        ];
        let out = clean_narrations(input);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].narration, "C opens the door");
        assert!(clean_narrations(vec![]).is_empty());
    }

    #[test]
    fn average_duration() {
        let a = [ann("v", 0, 2, "x"), ann("v", 2, 4, "x")];
        assert_eq!(average_clip_duration(&a).unwrap(), 2.0);
        assert_eq!(average_clip_duration(&[ann("v", 1, 3, "x")]).unwrap(), 2.0);
        assert!(matches!(average_clip_duration(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn gap_tiling_example() {
        let covered = [Interval { t: 0, e: 2 }, Interval { t: 8, e: 10 }];
        let s = ClipSampler::new(2.0).unwrap();
        let got = tile_gaps(10, &covered, &s);
        assert_eq!(
            got,
            vec![Interval { t: 2, e: 4 }, Interval { t: 4, e: 6 }, Interval { t: 6, e: 8 }]
        );
        assert!(tile_gaps(10, &[Interval { t: 0, e: 10 }], &s).is_empty());
        assert!(tile_gaps(3, &[], &ClipSampler::new(4.0).unwrap()).is_empty());
    }

    #[test]
    fn fractional_delta_rounds_to_a_frame() {
        assert_eq!(ClipSampler::new(0.3).unwrap().clip_len(), 1);
        assert_eq!(ClipSampler::new(2.5).unwrap().clip_len(), 3);
        assert!(ClipSampler::new(0.0).is_err());
    }

    #[test]
    fn chunk_subset_identity_at_one() {
        let cfg = WorldConfig {
            num_videos: 3,
            ..Default::default()
        };
        let vids = generate_world(&cfg).unwrap();
        let gt = ground_truth_annotations(&vids, &Grammar::standard()).unwrap();
        let (kept, skipped) = chunk_subset(&vids, &gt, 15, 1).unwrap();
        assert_eq!(kept, gt);
        assert!(skipped.clips.is_empty());
    }

    #[test]
    fn chunk_subset_halves_the_annotations() {
        let cfg = WorldConfig {
            num_videos: 30,
            ..Default::default()
        };
        let vids = generate_world(&cfg).unwrap();
        let gt = ground_truth_annotations(&vids, &Grammar::standard()).unwrap();
        let (kept, skipped) = chunk_subset(&vids, &gt, 15, 2).unwrap();
        // counting oracle: starts in even chunks
        let expect = gt.iter().filter(|a| (a.t / 15) % 2 == 0).count();
        assert_eq!(kept.len(), expect);
        let frac = kept.len() as f64 / gt.len() as f64;
        // 6-frame events on 15-frame chunks put 3 of every 5 starts in even chunks
        assert!((frac - 0.5).abs() <= 0.15, "kept fraction {frac}");
        for c in &skipped.clips {
            assert!(!skipped.in_kept_chunk(c.t));
            assert_eq!(c.e - c.t, skipped.clip_len);
            assert_eq!(c.t / 15, (c.e - 1) / 15, "clip stays inside its chunk");
        }
        let skipped_chunks = vids.len() * 4;
        assert_eq!(skipped.clips.len(), skipped_chunks * skipped.clips_per_chunk);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut recs: Vec<ClipAnnotation> = (0..100)
            .map(|i| ann(&format!("v{i}"), i, i + 3, "C moves the red square left"))
            .collect();
        recs[5].provenance = Provenance::Narrated;
        recs[5].score = Some(0.62);
        save_corpus(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(r#""provenance":"narrated","score":0.62"#));
        assert_eq!(load_corpus(&path).unwrap(), recs);

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_corpus(&empty).unwrap().is_empty());

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, format!("{}\n{{not json\n", text.lines().next().unwrap())).unwrap();
        match load_corpus(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn brute_force_free(len: usize, covered: &[Interval]) -> Vec<bool> {
        (0..len).map(|f| !covered.iter().any(|c| c.t <= f && f < c.e)).collect()
    }

    proptest! {
        #[test]
        fn pseudo_intervals_avoid_ground_truth_and_are_maximal(
            len in 1usize..60,
            raw in proptest::collection::vec((0usize..60, 1usize..8), 0..6),
            delta in 1usize..6,
        ) {
            let covered: Vec<Interval> = raw.iter()
                .map(|&(t, l)| Interval { t: t.min(len - 1), e: (t + l).min(len) })
                .filter(|iv| iv.e > iv.t)
                .collect();
            let sampler = ClipSampler::new(delta as f64).unwrap();
            let got = tile_gaps(len, &covered, &sampler);
            let free = brute_force_free(len, &covered);
            for iv in &got {
                prop_assert_eq!(iv.e - iv.t, delta);
                prop_assert!((iv.t..iv.e).all(|f| free[f]));
            }
            // maximality: per maximal free run of length L, floor(L / delta) clips
            let mut expect = 0;
            let mut run = 0;
            for f in free.iter().chain(std::iter::once(&false)) {
                if *f { run += 1 } else { expect += run / delta; run = 0; }
            }
            prop_assert_eq!(got.len(), expect);
        }

        #[test]
        fn cleaning_is_idempotent(words in proptest::collection::vec(
            proptest::collection::vec(prop_oneof!["C", "moves", "the", "#unsure", "red", "#Unsure", "box"], 0..7), 0..20)) {
            let anns: Vec<ClipAnnotation> = words.iter().map(|w| ann("v", 0, 1, &w.join(" "))).collect();
            let once = clean_narrations(anns);
            prop_assert_eq!(clean_narrations(once.clone()), once);
        }
    }
}
