//! Sequence directories: `visible/%06d.ppm`, `infrared/%06d.pgm`, `groundtruth.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Frame;
use crate::io::netpbm;
use crate::tensor::checkpoint::write_atomic;

/// Parses `x,y,w,h`; commas, spaces and tabs all separate fields.
pub fn parse_gt_line(line: &str, line_no: usize) -> Result<BBox> {
    let fields: Vec<&str> = line
        .split([',', ' ', '\t'])
        .filter(|s| !s.is_empty())
        .collect();
    if fields.len() != 4 {
        return Err(Error::Line {
            line: line_no,
            detail: format!("expected 4 fields, found {}", fields.len()),
        });
    }
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Line {
            line: line_no,
            detail: format!("{f:?} is not a number"),
        })?;
    }
    Ok(BBox::new(v[0], v[1], v[2], v[3]))
}

/// One box per non-empty line.
pub fn parse_boxes(text: &str) -> Result<Vec<BBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_gt_line(l.trim(), i + 1))
        .collect()
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_boxes(&text).map_err(|e| match e {
        Error::Line { line, detail } => Error::Parse {
            path: path.to_path_buf(),
            offset: line,
            detail: format!("line {line}: {detail}"),
        },
        other => other,
    })
}

/// `x,y,w,h` lines with LF endings.
pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{:.3},{:.3},{:.3},{:.3}", b.x, b.y, b.w, b.h);
    }
    s
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    write_atomic(path, format_boxes(boxes).as_bytes())
}

pub fn visible_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("visible").join(format!("{:06}.ppm", index + 1))
}

pub fn infrared_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("infrared").join(format!("{:06}.pgm", index + 1))
}

fn count_frames(dir: &Path, path_of: fn(&Path, usize) -> PathBuf) -> usize {
    let mut n = 0;
    while path_of(dir, n).is_file() {
        n += 1;
    }
    n
}

/// A validated sequence on disk; frames are decoded on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDir {
    pub path: PathBuf,
    pub groundtruth: Vec<BBox>,
}

impl SequenceDir {
    pub fn open(path: &Path) -> Result<Self> {
        let visible = count_frames(path, visible_path);
        let infrared = count_frames(path, infrared_path);
        let groundtruth = read_boxes(&path.join("groundtruth.txt"))?;
        if visible != infrared || visible != groundtruth.len() {
            return Err(Error::CountMismatch {
                path: path.to_path_buf(),
                detail: format!(
                    "{visible} visible frames, {infrared} infrared frames, {} ground-truth lines",
                    groundtruth.len()
                ),
            });
        }
        if visible == 0 {
            return Err(Error::CountMismatch {
                path: path.to_path_buf(),
                detail: "no frames".into(),
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
            groundtruth,
        })
    }

    pub fn len(&self) -> usize {
        self.groundtruth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groundtruth.is_empty()
    }

    pub fn name(&self) -> String {
        self.path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    /// Zero-based frame pair.
    pub fn frame(&self, index: usize) -> Result<(Frame, Frame)> {
        let rgb = netpbm::read(&visible_path(&self.path, index))?;
        let tir = netpbm::read(&infrared_path(&self.path, index))?;
        if rgb.channels != 3 || tir.channels != 1 || (rgb.width, rgb.height) != (tir.width, tir.height) {
            return Err(Error::contract(format!(
                "{}: frame {} is not an aligned PPM/PGM pair",
                self.path.display(),
                index + 1
            )));
        }
        Ok((rgb, tir))
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<(Frame, Frame)>> + '_ {
        (0..self.len()).map(|i| self.frame(i))
    }

    pub fn load(&self) -> Result<Sequence> {
        Ok(Sequence {
            name: self.name(),
            frames: self.frames().collect::<Result<_>>()?,
            groundtruth: self.groundtruth.clone(),
        })
    }
}

/// A fully decoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<(Frame, Frame)>,
    pub groundtruth: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<SequenceDir> {
        for sub in ["visible", "infrared"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        for (i, (rgb, tir)) in self.frames.iter().enumerate() {
            netpbm::write(&visible_path(dir, i), rgb)?;
            netpbm::write(&infrared_path(dir, i), tir)?;
        }
        write_boxes(&dir.join("groundtruth.txt"), &self.groundtruth)?;
        SequenceDir::open(dir)
    }
}

/// Sequence directories directly under `root`, sorted by name. `root` itself
/// counts as one sequence when it holds a `groundtruth.txt`.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("groundtruth.txt").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let rd = std::fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut dirs = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(root.display().to_string(), e))?.path();
        if p.join("groundtruth.txt").is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}
