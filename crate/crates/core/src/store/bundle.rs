use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, QAItem, Result, StoreError, CAPTIONS_FILE, EMBEDDINGS_FILE, MANIFEST_FILE, QA_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub video_id: String,
    pub total_frames: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoBundle {
    pub video_id: String,
    pub total_frames: u32,
    pub fps: Option<f64>,
    pub embedding_dim: Option<usize>,
    pub captions: BTreeMap<u32, String>,
    pub embeddings: BTreeMap<u32, Vec<f64>>,
    pub qa: Vec<QAItem>,
}

impl VideoBundle {
    pub fn new(video_id: impl Into<String>, total_frames: u32) -> Self {
        Self {
            video_id: video_id.into(),
            total_frames,
            fps: None,
            embedding_dim: None,
            captions: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            qa: Vec::new(),
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            video_id: self.video_id.clone(),
            total_frames: self.total_frames,
            fps: self.fps,
            embedding_dim: self.embedding_dim,
        }
    }

    /// Dimension shared by all stored embeddings, or the declared one.
    pub fn dimension(&self) -> Option<usize> {
        self.embedding_dim.or_else(|| self.embeddings.values().next().map(Vec::len))
    }

    /// Checks frame bounds and embedding dimensions.
    pub fn validate(&self) -> Result<()> {
        let path = PathBuf::from(&self.video_id);
        for &frame in self.captions.keys().chain(self.embeddings.keys()) {
            if frame >= self.total_frames {
                return Err(StoreError::FrameOutOfRange {
                    file: path.clone(),
                    line: 0,
                    frame,
                    total_frames: self.total_frames,
                });
            }
        }
        check_dimensions(self.embeddings.iter().map(|(f, v)| (*f, v.len())), self.embedding_dim)
    }
}

fn check_dimensions(dims: impl Iterator<Item = (u32, usize)>, declared: Option<usize>) -> Result<()> {
    let mut first: Option<(u32, usize)> = None;
    for (frame, dim) in dims {
        if let Some(declared) = declared {
            if dim != declared {
                return Err(StoreError::DeclaredDimension { frame, dim, declared });
            }
        }
        match first {
            None => first = Some((frame, dim)),
            Some((first_frame, first_dim)) if first_dim != dim => {
                return Err(StoreError::MixedDimensions {
                    first_frame,
                    first_dim,
                    frame,
                    dim,
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Read `embeddings.tsv`. Off skips the largest file of a bundle.
    pub embeddings: bool,
    pub qa: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { embeddings: true, qa: true }
    }
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn escape_caption(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_caption(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

struct TableCtx<'a> {
    file: &'a Path,
    total_frames: u32,
}

impl TableCtx<'_> {
    fn malformed(&self, line: usize, reason: impl Into<String>) -> StoreError {
        StoreError::Malformed {
            file: self.file.to_path_buf(),
            line,
            reason: reason.into(),
        }
    }

    fn split<'l>(&self, line: usize, text: &'l str) -> Result<(u32, &'l str)> {
        let (frame, rest) = text
            .split_once('\t')
            .ok_or_else(|| self.malformed(line, "expected frame index, a tab, then the value"))?;
        let frame: u32 = frame
            .trim()
            .parse()
            .map_err(|_| self.malformed(line, format!("invalid frame index {frame:?}")))?;
        if frame >= self.total_frames {
            return Err(StoreError::FrameOutOfRange {
                file: self.file.to_path_buf(),
                line,
                frame,
                total_frames: self.total_frames,
            });
        }
        Ok((frame, rest))
    }

    fn insert<V>(&self, map: &mut BTreeMap<u32, V>, line: usize, frame: u32, value: V) -> Result<()> {
        if map.insert(frame, value).is_some() {
            return Err(StoreError::DuplicateFrame {
                file: self.file.to_path_buf(),
                line,
                frame,
            });
        }
        Ok(())
    }
}

fn parse_captions(text: &str, ctx: &TableCtx<'_>) -> Result<BTreeMap<u32, String>> {
    let mut out = BTreeMap::new();
    for (line, l) in data_lines(text) {
        let (frame, raw) = ctx.split(line, l)?;
        let caption = unescape_caption(raw).map_err(|r| ctx.malformed(line, r))?;
        ctx.insert(&mut out, line, frame, caption)?;
    }
    Ok(out)
}

fn parse_embeddings(text: &str, ctx: &TableCtx<'_>) -> Result<BTreeMap<u32, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (line, l) in data_lines(text) {
        let (frame, raw) = ctx.split(line, l)?;
        let vector = raw
            .split_whitespace()
            .map(|t| match t.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(ctx.malformed(line, format!("invalid vector component {t:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if vector.is_empty() {
            return Err(ctx.malformed(line, "empty embedding"));
        }
        ctx.insert(&mut out, line, frame, vector)?;
    }
    Ok(out)
}

fn parse_manifest(path: &Path, text: &str) -> Result<Manifest> {
    let invalid = |reason: String| StoreError::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let m: Manifest = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
    if m.total_frames == 0 {
        return Err(invalid("total_frames must be at least 1".into()));
    }
    if m.embedding_dim == Some(0) {
        return Err(invalid("embedding_dim must be at least 1".into()));
    }
    if m.fps.is_some_and(|f| !(f.is_finite() && f > 0.0)) {
        return Err(invalid("fps must be positive".into()));
    }
    Ok(m)
}

/// Parses a QA file, one JSON object per line. Items without an `id` get
/// `<video_id>:<line>`.
pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QAItem>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_qa(path, &text)
}

fn parse_qa(path: &Path, text: &str) -> Result<Vec<QAItem>> {
    let mut items = Vec::new();
    for (line, l) in data_lines(text) {
        let invalid = |reason: String| StoreError::InvalidQa {
            file: path.to_path_buf(),
            line,
            reason,
        };
        let mut item: QAItem = serde_json::from_str(l).map_err(|e| invalid(e.to_string()))?;
        item.validate().map_err(invalid)?;
        if item.id.is_none() {
            item.id = Some(format!("{}:{line}", item.video_id));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_bundle(dir: impl AsRef<Path>, opts: LoadOptions) -> Result<VideoBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_text = read_optional(&manifest_path)?.ok_or_else(|| StoreError::MissingManifest(dir.to_path_buf()))?;
    let manifest = parse_manifest(&manifest_path, &manifest_text)?;

    let captions_path = dir.join(CAPTIONS_FILE);
    let captions = match read_optional(&captions_path)? {
        Some(text) => parse_captions(
            &text,
            &TableCtx {
                file: &captions_path,
                total_frames: manifest.total_frames,
            },
        )?,
        None => BTreeMap::new(),
    };

    let embeddings_path = dir.join(EMBEDDINGS_FILE);
    let embeddings = match opts.embeddings.then(|| read_optional(&embeddings_path)).transpose()?.flatten() {
        Some(text) => parse_embeddings(
            &text,
            &TableCtx {
                file: &embeddings_path,
                total_frames: manifest.total_frames,
            },
        )?,
        None => BTreeMap::new(),
    };
    check_dimensions(embeddings.iter().map(|(f, v)| (*f, v.len())), manifest.embedding_dim)?;

    let qa_path = dir.join(QA_FILE);
    let qa = match opts.qa.then(|| read_optional(&qa_path)).transpose()?.flatten() {
        Some(text) => parse_qa(&qa_path, &text)?,
        None => Vec::new(),
    };

    tracing::debug!(video = %manifest.video_id, captions = captions.len(), embeddings = embeddings.len(), "bundle loaded");
    Ok(VideoBundle {
        video_id: manifest.video_id,
        total_frames: manifest.total_frames,
        fps: manifest.fps,
        embedding_dim: manifest.embedding_dim,
        captions,
        embeddings,
        qa,
    })
}

/// Writes the bundle layout into `dir`, creating it if needed. Tables that
/// would be empty are not written.
pub fn save_bundle(bundle: &VideoBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, content: String| {
        let path = dir.join(name);
        fs::write(&path, content).map_err(io_err(path))
    };
    let manifest = serde_json::to_string_pretty(&bundle.manifest()).expect("manifest serializes");
    write(MANIFEST_FILE, manifest + "\n")?;
    if !bundle.captions.is_empty() {
        let mut out = String::new();
        for (f, c) in &bundle.captions {
            let _ = writeln!(out, "{f}\t{}", escape_caption(c));
        }
        write(CAPTIONS_FILE, out)?;
    }
    if !bundle.embeddings.is_empty() {
        let mut out = String::new();
        for (f, v) in &bundle.embeddings {
            let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(out, "{f}\t{}", parts.join(" "));
        }
        write(EMBEDDINGS_FILE, out)?;
    }
    if !bundle.qa.is_empty() {
        let mut out = String::new();
        for item in &bundle.qa {
            out.push_str(&serde_json::to_string(item).expect("QA item serializes"));
            out.push('\n');
        }
        write(QA_FILE, out)?;
    }
    Ok(())
}
