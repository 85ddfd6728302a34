//! Frame-level symbol alignments and corpus manifests (plain text).
//!
//! Alignment files hold one segment per line, `symbol start_frame end_frame`,
//! with `end_frame` exclusive. Segments must tile `[0, L)` without gaps.
//! Manifests hold one utterance per line, tab separated:
//! `wav_path  alignment_path|-  speaker_id`. Lines starting with `#` and
//! blank lines are ignored in both formats.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub symbol: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    segments: Vec<Segment>,
}

impl Alignment {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("alignment has no segments"));
        }
        let mut expect = 0;
        for s in &segments {
            if s.start != expect {
                return Err(Error::invalid(format!(
                    "segment starts at frame {} but previous ended at {expect}",
                    s.start
                )));
            }
            if s.end <= s.start {
                return Err(Error::invalid(format!("empty segment at frame {}", s.start)));
            }
            expect = s.end;
        }
        Ok(Alignment { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n_frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    /// One symbol per frame.
    pub fn frame_symbols(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_frames());
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.symbol, s.end - s.start));
        }
        out
    }

    pub fn max_symbol(&self) -> usize {
        self.segments.iter().map(|s| s.symbol).max().unwrap_or(0)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |why: &str| Error::format("alignment", format!("line {}: {why}", no + 1));
            if fields.len() != 3 {
                return Err(bad("expected `symbol start_frame end_frame`"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("`{s}` is not a non-negative integer")));
            segments.push(Segment {
                symbol: num(fields[0])?,
                start: num(fields[1])?,
                end: num(fields[2])?,
            });
        }
        Alignment::new(segments).map_err(|e| Error::format("alignment", e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for seg in &self.segments {
            let _ = writeln!(s, "{} {} {}", seg.symbol, seg.start, seg.end);
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub wav: PathBuf,
    pub alignment: Option<PathBuf>,
    pub speaker: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            let bad = |why: &str| Error::format("manifest", format!("line {}: {why}", no + 1));
            if fields.len() != 3 {
                return Err(bad("expected three tab-separated fields"));
            }
            if fields[0].is_empty() {
                return Err(bad("empty wav path"));
            }
            if fields[2].is_empty() {
                return Err(bad("empty speaker id"));
            }
            let alignment = match fields[1] {
                "" => return Err(bad("empty alignment field (use `-` for none)")),
                "-" => None,
                p => Some(PathBuf::from(p)),
            };
            entries.push(ManifestEntry {
                wav: PathBuf::from(fields[0]),
                alignment,
                speaker: fields[2].to_string(),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# wav\talignment\tspeaker\n");
        for e in &self.entries {
            let align = e.alignment.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            let _ = writeln!(s, "{}\t{}\t{}", e.wav.display(), align, e.speaker);
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
