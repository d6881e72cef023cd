use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A skeleton sequence: `frames x joints` points in meters plus a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonClip {
    frames: usize,
    joints: usize,
    points: Vec<[f64; 3]>,
    pub label: usize,
    pub subject: Option<String>,
    pub camera: Option<String>,
}

impl SkeletonClip {
    pub fn new(frames: usize, joints: usize, points: Vec<[f64; 3]>, label: usize) -> Result<Self> {
        if frames == 0 || joints == 0 {
            return Err(Error::arg("clip needs at least one frame and one joint"));
        }
        if points.len() != frames * joints {
            return Err(Error::dim("SkeletonClip::new", (frames, joints), points.len()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("clip coordinates must be finite".into()));
        }
        Ok(Self {
            frames,
            joints,
            points,
            label,
            subject: None,
            camera: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    #[inline]
    pub fn point(&self, t: usize, v: usize) -> [f64; 3] {
        self.points[t * self.joints + v]
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Serializes to the text clip format:
    ///
    /// ```text
    /// T <frames> V <joints> label <int> [subject <token>] [camera <token>]
    /// x y z x y z ...      (one line per frame, 3 * joints numbers)
    /// ```
    ///
    /// Numbers use Rust's shortest round-trip float formatting, so loading
    /// a saved clip reproduces it bit for bit.
    pub fn to_text(&self) -> String {
        let mut s = format!("T {} V {} label {}", self.frames, self.joints, self.label);
        if let Some(subject) = &self.subject {
            let _ = write!(s, " subject {subject}");
        }
        if let Some(camera) = &self.camera {
            let _ = write!(s, " camera {camera}");
        }
        s.push('\n');
        for t in 0..self.frames {
            for v in 0..self.joints {
                let p = self.point(t, v);
                if v > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty clip file".into(),
        })?;
        let (frames, joints, label, subject, camera) = parse_header(header)?;
        let mut points = Vec::with_capacity(frames * joints);
        for t in 0..frames {
            let (idx, line) = lines.next().ok_or(Error::Parse {
                line: t + 2,
                msg: format!("file ends after {t} of {frames} frames"),
            })?;
            let lineno = idx + 1;
            let values = line
                .split_ascii_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("expected a number, got `{tok}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != 3 * joints {
                return Err(Error::Format(format!(
                    "line {lineno}: expected {joints} joints ({} numbers), got {} numbers",
                    3 * joints,
                    values.len()
                )));
            }
            points.extend(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
        }
        if let Some((idx, line)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("unexpected content after {frames} frames: `{}`", line.trim()),
            });
        }
        let mut clip = Self::new(frames, joints, points, label)?;
        clip.subject = subject;
        clip.camera = camera;
        Ok(clip)
    }
}

type Header = (usize, usize, usize, Option<String>, Option<String>);

fn parse_header(line: &str) -> Result<Header> {
    let err = |msg: String| Error::Parse { line: 1, msg };
    let tokens: Vec<_> = line.split_ascii_whitespace().collect();
    let num = |s: &str| s.parse::<usize>().map_err(|_| err(format!("expected an integer, got `{s}`")));
    let (frames, joints, label, rest) = match tokens.as_slice() {
        ["T", t, "V", v, "label", l, rest @ ..] => (num(t)?, num(v)?, num(l)?, rest),
        _ => return Err(err("expected header `T <frames> V <joints> label <int>`".into())),
    };
    let (mut subject, mut camera) = (None, None);
    let mut it = rest.chunks(2);
    for pair in it.by_ref() {
        match pair {
            ["subject", s] if subject.is_none() => subject = Some(s.to_string()),
            ["camera", c] if camera.is_none() => camera = Some(c.to_string()),
            _ => return Err(err(format!("unexpected header fields `{}`", pair.join(" ")))),
        }
    }
    Ok((frames, joints, label, subject, camera))
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<SkeletonClip> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SkeletonClip::parse(&text)
}

pub fn save_clip(clip: &SkeletonClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, clip.to_text()).map_err(|e| Error::io(path, e))
}

/// One manifest entry: clip path and the label to train it with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// Parses a manifest: one `<path> <label>` per line, blank lines and lines
/// starting with `#` skipped. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<_> = trimmed.split_ascii_whitespace().collect();
        let [path, label] = tokens.as_slice() else {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "expected `<path> <label>`".into(),
            });
        };
        let label = label.parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("bad label `{label}`"),
        })?;
        let path = Path::new(path);
        let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
        out.push(ManifestEntry { path, label });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}
