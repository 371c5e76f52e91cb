//! Labelled-patch ingestion, pairing and subject splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image_io::{read_png, write_png};
use super::{EyeSample, EyeSide, RedirectionPair};
use crate::error::{Error, Result};
use crate::npg::{GazeAngle, HeadPose};
use crate::tensor::Tensor;

pub const LABEL_HEADER: [&str; 6] = ["path", "pitch_deg", "yaw_deg", "head_yaw_deg", "subject_id", "eye_side"];

/// How loaded images are checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub size: usize,
    pub channels: usize,
    /// Reject images whose extent differs from `size` instead of resizing.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { size: 64, channels: 1, strict: true }
    }
}

fn parse_field<T: std::str::FromStr>(line: u64, name: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Data(format!("labels line {line}: cannot parse {name} `{raw}`")))
}

/// One parsed labels row; `line` counts the header as line 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub line: u64,
    pub path: String,
    pub gaze: GazeAngle,
    pub head: HeadPose,
    pub subject_id: String,
    pub eye_side: EyeSide,
}

/// Parses a labels file without touching the images it references.
pub fn read_labels(labels_path: &Path) -> Result<Vec<LabelRow>> {
    let text = std::fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Data(format!("labels line 1: {e}")))?
        .clone();
    if header.iter().collect::<Vec<_>>() != LABEL_HEADER {
        return Err(Error::Data(format!(
            "labels line 1: expected header `{}`, found `{}`",
            LABEL_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Data(format!("labels line {line}: {e}")))?;
        if rec.len() != LABEL_HEADER.len() {
            return Err(Error::Data(format!(
                "labels line {line}: expected {} fields, found {}",
                LABEL_HEADER.len(),
                rec.len()
            )));
        }
        let gaze = GazeAngle::new(parse_field(line, "pitch_deg", &rec[1])?, parse_field(line, "yaw_deg", &rec[2])?)
            .map_err(|e| Error::Data(format!("labels line {line}: {e}")))?;
        let head = HeadPose::new(parse_field(line, "head_yaw_deg", &rec[3])?)
            .map_err(|e| Error::Data(format!("labels line {line}: {e}")))?;
        let eye_side: EyeSide = rec[5]
            .parse()
            .map_err(|e| Error::Data(format!("labels line {line}: {e}")))?;
        out.push(LabelRow {
            line,
            path: rec[0].to_string(),
            gaze,
            head,
            subject_id: rec[4].to_string(),
            eye_side,
        });
    }
    Ok(out)
}

/// Reads `labels_file` (relative to `root` unless absolute) and decodes every
/// referenced patch. Line numbers in errors count the header as line 1.
pub fn load_dataset(root: &Path, labels_file: &Path, opts: LoadOptions) -> Result<Vec<EyeSample>> {
    let labels_path = if labels_file.is_absolute() { labels_file.to_path_buf() } else { root.join(labels_file) };
    read_labels(&labels_path)?
        .into_iter()
        .map(|row| {
            let line = row.line;
            let path = root.join(&row.path);
            if !path.is_file() {
                return Err(Error::Data(format!("labels line {line}: image {} not found", path.display())));
            }
            let image = read_png(&path, opts.channels).map_err(|e| Error::Data(format!("labels line {line}: {e}")))?;
            Ok(EyeSample {
                image: fit_extent(image, opts, line, &path)?,
                gaze: row.gaze,
                head: row.head,
                subject_id: row.subject_id,
                eye_side: row.eye_side,
            })
        })
        .collect()
}

fn fit_extent(image: Tensor<f32>, opts: LoadOptions, line: u64, path: &Path) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h == opts.size && w == opts.size {
        return Ok(image);
    }
    if opts.strict {
        return Err(Error::Data(format!(
            "labels line {line}: image {} is {w}x{h}, expected {n}x{n}",
            path.display(),
            n = opts.size
        )));
    }
    Ok(resample_bilinear(&image, opts.size))
}

/// Plain bilinear resize of a `[c, h, w]` tensor to `size × size`.
fn resample_bilinear(image: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * inp as f32 / out as f32 - 0.5).clamp(0.0, (inp - 1) as f32);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(inp - 1), s - i0 as f32)
    };
    Tensor::from_fn(&[c, size, size], |idx| {
        let (ch, r, col) = (idx / (size * size), (idx / size) % size, idx % size);
        let (r0, r1, fr) = coord(r, size, h);
        let (c0, c1, fc) = coord(col, size, w);
        let at = |y: usize, x: usize| d[ch * h * w + y * w + x];
        (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1)) + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1))
    })
}

/// Writes samples as PNGs under `root/imgs` plus a labels file.
pub fn write_labels(root: &Path, labels_file: &str, samples: &[EyeSample]) -> Result<()> {
    let imgs = root.join("imgs");
    std::fs::create_dir_all(&imgs).map_err(|e| Error::io(&imgs, e))?;
    let labels_path = root.join(labels_file);
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", labels_path.display()));
    w.write_record(LABEL_HEADER).map_err(csv_err)?;
    for (i, s) in samples.iter().enumerate() {
        let rel = format!(
            "imgs/{}_{}_{}_{}_{}_{i:05}.png",
            s.subject_id,
            s.eye_side,
            s.head.yaw,
            s.gaze.pitch,
            s.gaze.yaw
        );
        write_png(&root.join(&rel), &s.image)?;
        w.write_record([
            rel,
            s.gaze.pitch.to_string(),
            s.gaze.yaw.to_string(),
            s.head.yaw.to_string(),
            s.subject_id.clone(),
            s.eye_side.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))
}

/// Draws `count` pairs whose members share subject, side and head pose.
/// Groups with a single sample are skipped.
pub fn pairs_from_samples(samples: &[EyeSample], count: usize, seed: u64) -> Result<Vec<RedirectionPair>> {
    let mut groups: BTreeMap<(String, EyeSide, i64), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = (s.subject_id.clone(), s.eye_side, (s.head.yaw * 1000.0).round() as i64);
        groups.entry(key).or_default().push(i);
    }
    let usable: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Data("no subject/side/head group holds two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let g = usable[rng.gen_range(0..usable.len())];
            let a = g[rng.gen_range(0..g.len())];
            let b = g[rng.gen_range(0..g.len())];
            RedirectionPair::new(samples[a].clone(), samples[b].clone())
        })
        .collect()
}

/// Splits pairs into (train, test) by subject id.
pub fn split_by_subject(pairs: Vec<RedirectionPair>, test_subjects: &[String]) -> (Vec<RedirectionPair>, Vec<RedirectionPair>) {
    pairs
        .into_iter()
        .partition(|p| !test_subjects.iter().any(|s| *s == p.source.subject_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pixel_to_unit;

    fn write_patch(dir: &Path, rel: &str, size: usize) {
        let t = Tensor::<f32>::from_fn(&[1, size, size], |i| pixel_to_unit((i % 256) as u8));
        std::fs::create_dir_all(dir.join(rel).parent().unwrap()).unwrap();
        write_png(&dir.join(rel), &t).unwrap();
    }

    #[test]
    fn empty_labels_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("labels.csv"), "").unwrap();
        assert!(load_dataset(dir.path(), Path::new("labels.csv"), LoadOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn parses_documented_row() {
        let dir = tempfile::tempdir().unwrap();
        write_patch(dir.path(), "imgs/s51_l_0_10_-5.png", 64);
        std::fs::write(
            dir.path().join("labels.csv"),
            "path,pitch_deg,yaw_deg,head_yaw_deg,subject_id,eye_side\nimgs/s51_l_0_10_-5.png,10,-5,0,s51,left\n",
        )
        .unwrap();
        let s = load_dataset(dir.path(), Path::new("labels.csv"), LoadOptions::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].gaze, GazeAngle { pitch: 10.0, yaw: -5.0 });
        assert_eq!(s[0].head, HeadPose { yaw: 0.0 });
        assert_eq!(s[0].subject_id, "s51");
        assert_eq!(s[0].eye_side, EyeSide::Left);
        assert_eq!(s[0].image.shape(), &[1, 64, 64]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write_patch(dir.path(), "a.png", 64);
        write_patch(dir.path(), "small.png", 32);
        let header = "path,pitch_deg,yaw_deg,head_yaw_deg,subject_id,eye_side\n";
        let cases = [
            ("a.png,1,2,0,s01,left\nmissing.png,0,0,0,s01,left\n", "line 3"),
            ("a.png,ten,2,0,s01,left\n", "line 2"),
            ("a.png,1,2,0,s01,left\nsmall.png,0,0,0,s01,left\n", "line 3"),
        ];
        for (body, needle) in cases {
            std::fs::write(dir.path().join("l.csv"), format!("{header}{body}")).unwrap();
            let err = load_dataset(dir.path(), Path::new("l.csv"), LoadOptions::default()).unwrap_err();
            assert!(err.to_string().contains(needle), "{err}");
        }
        let relaxed = LoadOptions { strict: false, ..LoadOptions::default() };
        let s = load_dataset(dir.path(), Path::new("l.csv"), relaxed).unwrap();
        assert_eq!(s[1].image.shape(), &[1, 64, 64]);
    }

    #[test]
    fn missing_labels_file_names_path() {
        let err = load_dataset(Path::new("/nonexistent"), Path::new("labels.csv"), LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/labels.csv"));
    }

    #[test]
    fn written_corpus_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = crate::data::make_pair_dataset(3, 9, &Default::default(), 16, 1).unwrap();
        let samples: Vec<EyeSample> = pairs.iter().flat_map(|p| [p.source.clone(), p.target.clone()]).collect();
        write_labels(dir.path(), "labels.csv", &samples).unwrap();
        let opts = LoadOptions { size: 16, channels: 1, strict: true };
        let back = load_dataset(dir.path(), Path::new("labels.csv"), opts).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.gaze, b.gaze);
            assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 127.5);
        }
        let repaired = pairs_from_samples(&back, 5, 1).unwrap();
        assert!(repaired.iter().all(|p| p.source.head == p.target.head));
    }

    #[test]
    fn split_separates_subjects() {
        let pairs = crate::data::make_pair_dataset(40, 2, &Default::default(), 8, 1).unwrap();
        let test = vec!["s51".to_string(), "s52".to_string()];
        let (tr, te) = split_by_subject(pairs, &test);
        assert!(tr.iter().all(|p| !test.contains(&p.source.subject_id)));
        assert!(te.iter().all(|p| test.contains(&p.source.subject_id)));
    }
}
