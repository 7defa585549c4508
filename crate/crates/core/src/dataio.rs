//! Synthetic scenes, PNM image/label files and the dataset manifest.
//!
//! # Manifest format
//!
//! A UTF-8 text file. Leading `key=value` lines, then two tables:
//!
//! ```text
//! version=zsseg-manifest-1
//! seed=7
//! ignore_index=255
//! seen=0,1,2,3
//! unseen=4,5
//! background=none          # or the label id painted on the canvas
//! [classes]
//! 0,red square,0.9,0.1,0.1,rectangle
//! [entries]
//! images/0000.ppm,labels/0000.pgm
//! ```
//!
//! Class rows are `id,name,r,g,b,shape` with shape one of `rectangle`,
//! `circle`, `triangle`. Entry paths are relative to the manifest's directory.
//! Blank lines and lines starting with `#` are skipped.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::metrics::SplitSpec;
use crate::seed;
use crate::tensor::Tensor4;

pub const MANIFEST_VERSION: &str = "zsseg-manifest-1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Circle,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Rectangle => "rectangle",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rectangle" => Some(Shape::Rectangle),
            "circle" => Some(Shape::Circle),
            "triangle" => Some(Shape::Triangle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub id: u8,
    pub name: String,
    pub color: [f64; 3],
    pub shape: Shape,
}

/// What the label map says about canvas pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundPolicy {
    /// Canvas pixels carry `ignore_index`.
    Ignore,
    /// Canvas pixels carry the id one past the last object class.
    Labeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassSpec>,
    pub unseen: BTreeSet<u8>,
    pub canvas_color: [f64; 3],
    pub objects: (usize, usize),
    /// Object bounding-box side range in pixels.
    pub object_size: (usize, usize),
    pub background: BackgroundPolicy,
    /// Chebyshev radius of the ignore band around label edges; 0 disables it.
    pub border: usize,
    /// Per-object colour offset bound, drawn uniformly per channel.
    pub object_jitter: f64,
    pub pixel_jitter: f64,
    pub min_color_distance: f64,
}

impl SceneSpec {
    /// Six colour/shape classes on a dark canvas; the last two are unseen.
    pub fn benchmark() -> Self {
        let table: [(&str, [f64; 3], Shape); 6] = [
            ("red square", [0.9, 0.1, 0.1], Shape::Rectangle),
            ("green circle", [0.1, 0.8, 0.2], Shape::Circle),
            ("blue triangle", [0.15, 0.2, 0.9], Shape::Triangle),
            ("yellow square", [0.9, 0.85, 0.1], Shape::Rectangle),
            ("magenta circle", [0.85, 0.15, 0.8], Shape::Circle),
            ("cyan triangle", [0.1, 0.8, 0.85], Shape::Triangle),
        ];
        Self {
            height: 64,
            width: 64,
            classes: table
                .iter()
                .enumerate()
                .map(|(i, (name, color, shape))| ClassSpec {
                    id: i as u8,
                    name: name.to_string(),
                    color: *color,
                    shape: *shape,
                })
                .collect(),
            unseen: [4, 5].into_iter().collect(),
            canvas_color: [0.3, 0.3, 0.3],
            objects: (1, 4),
            object_size: (14, 30),
            background: BackgroundPolicy::Ignore,
            border: 1,
            object_jitter: 0.05,
            pixel_jitter: 0.01,
            min_color_distance: 0.3,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn background_label(&self) -> u8 {
        match self.background {
            BackgroundPolicy::Ignore => IGNORE_INDEX,
            BackgroundPolicy::Labeled => self.classes.len() as u8,
        }
    }

    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        self.classes.iter().map(|c| c.color.to_vec()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn split(&self) -> Result<SplitSpec> {
        let unseen: BTreeSet<usize> = self.unseen.iter().map(|&c| c as usize).collect();
        let seen = (0..self.classes.len()).filter(|c| !unseen.contains(c)).collect();
        SplitSpec::new(seen, unseen)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k == 0 || k >= IGNORE_INDEX as usize {
            return Err(Error::Config(format!("class count {} outside 1..=254", k)));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Config(format!(
                    "class ids must be 0..{}; found {} at position {}",
                    k - 1,
                    c.id,
                    i
                )));
            }
            if c.name.is_empty() || c.name.contains(',') || c.name.contains('\n') {
                return Err(Error::Config(format!("invalid class name `{}`", c.name)));
            }
            if c.color.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("colour of `{}` outside [0,1]", c.name)));
            }
        }
        for a in 0..k {
            for b in a + 1..k {
                let d = l2(&self.classes[a].color, &self.classes[b].color);
                if d < self.min_color_distance {
                    return Err(Error::Config(format!(
                        "prototypes of `{}` and `{}` are {:.3} apart (minimum {})",
                        self.classes[a].name, self.classes[b].name, d, self.min_color_distance
                    )));
                }
            }
        }
        if let Some(&u) = self.unseen.iter().find(|&&u| u as usize >= k) {
            return Err(Error::Config(format!("unseen class {} not in the table", u)));
        }
        let (lo, hi) = self.objects;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("objects-per-image range {}..={} invalid", lo, hi)));
        }
        let (smin, smax) = self.object_size;
        let room = self.height.min(self.width).saturating_sub(2 * self.border);
        if smin < 2 || smin > smax || smax > room {
            return Err(Error::Config(format!(
                "object size range {}..={} does not fit a {}x{} canvas",
                smin, smax, self.height, self.width
            )));
        }
        if !(self.object_jitter >= 0.0 && self.pixel_jitter >= 0.0) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

fn l2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One object as drawn, before any colour jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub class: u8,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PlacedObject {
    fn covers(&self, shape: Shape, y: usize, x: usize) -> bool {
        if y < self.top || x < self.left || y >= self.top + self.height || x >= self.left + self.width {
            return false;
        }
        let py = (y - self.top) as f64 + 0.5;
        let px = (x - self.left) as f64 + 0.5;
        let (h, w) = (self.height as f64, self.width as f64);
        match shape {
            Shape::Rectangle => true,
            Shape::Circle => {
                let (dy, dx) = ((py - h / 2.0) / (h / 2.0), (px - w / 2.0) / (w / 2.0));
                dy * dy + dx * dx <= 1.0
            }
            // apex at the top centre, base along the bottom edge
            Shape::Triangle => {
                let half = (w / 2.0) * (py / h);
                (px - w / 2.0).abs() <= half
            }
        }
    }
}

/// A rendered scene with the ground truth kept alongside.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor4,
    pub labels: LabelMap,
    pub objects: Vec<PlacedObject>,
    /// Visible class per pixel before the ignore band, `None` on canvas.
    pub visible: Vec<Option<u8>>,
}

/// Render scene `index` of the set generated from `seed`.
pub fn render_scene(spec: &SceneSpec, seed: u64, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = seed::rng_indexed(seed, "scene", index);
    let (h, w) = (spec.height, spec.width);
    let k = spec.classes.len();
    let n_obj = rng.random_range(spec.objects.0..=spec.objects.1);
    let margin = spec.border;
    let mut objects = Vec::with_capacity(n_obj);
    let mut colors = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = rng.random_range(0..k) as u8;
        let oh = rng.random_range(spec.object_size.0..=spec.object_size.1);
        let ow = rng.random_range(spec.object_size.0..=spec.object_size.1);
        let top = rng.random_range(margin..=h - margin - oh);
        let left = rng.random_range(margin..=w - margin - ow);
        let mut color = spec.classes[class as usize].color;
        for c in color.iter_mut() {
            let d = if spec.object_jitter > 0.0 {
                rng.random_range(-spec.object_jitter..=spec.object_jitter)
            } else {
                0.0
            };
            *c = (*c + d).clamp(0.0, 1.0);
        }
        objects.push(PlacedObject {
            class,
            top,
            left,
            height: oh,
            width: ow,
        });
        colors.push(color);
    }

    let mut visible: Vec<Option<u8>> = vec![None; h * w];
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (i, obj) in objects.iter().enumerate() {
        let shape = spec.classes[obj.class as usize].shape;
        for y in obj.top..obj.top + obj.height {
            for x in obj.left..obj.left + obj.width {
                if obj.covers(shape, y, x) {
                    visible[y * w + x] = Some(obj.class);
                    owner[y * w + x] = Some(i);
                }
            }
        }
    }

    let mut image = Tensor4::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let base = match owner[y * w + x] {
                Some(i) => colors[i],
                None => spec.canvas_color,
            };
            for (c, v) in base.iter().enumerate() {
                let d = if spec.pixel_jitter > 0.0 {
                    rng.random_range(-spec.pixel_jitter..=spec.pixel_jitter)
                } else {
                    0.0
                };
                image.set(0, c, y, x, (v + d).clamp(0.0, 1.0));
            }
        }
    }

    let bg = spec.background_label();
    let r = spec.border as isize;
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let here = visible[y * w + x];
            let mut edge = false;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if visible[yy as usize * w + xx as usize] != here {
                        edge = true;
                        break 'scan;
                    }
                }
            }
            labels[y * w + x] = if edge {
                IGNORE_INDEX
            } else {
                here.unwrap_or(bg)
            };
        }
    }

    Ok(Scene {
        image,
        labels: LabelMap::new(h, w, labels)?,
        objects,
        visible,
    })
}

/// Render `count` scenes into `out_dir` and write the manifest next to them.
pub fn gen_dataset(spec: &SceneSpec, count: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Argument("dataset count must be at least 1".into()));
    }
    spec.validate()?;
    for sub in ["images", "labels"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let scene = render_scene(spec, seed, i as u64)?;
        let img = PathBuf::from(format!("images/{:04}.ppm", i));
        let lab = PathBuf::from(format!("labels/{:04}.pgm", i));
        write_image(&out_dir.join(&img), &scene.image)?;
        write_labels(&out_dir.join(&lab), &scene.labels)?;
        entries.push((img, lab));
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        seed,
        ignore_index: IGNORE_INDEX,
        classes: spec
            .classes
            .iter()
            .map(|c| ManifestClass {
                id: c.id,
                name: c.name.clone(),
                color: c.color,
                shape: c.shape,
                seen: !spec.unseen.contains(&c.id),
            })
            .collect(),
        background: match spec.background {
            BackgroundPolicy::Ignore => None,
            BackgroundPolicy::Labeled => Some(spec.background_label()),
        },
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

// ---------------------------------------------------------------- PNM files

struct PnmHeader {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2], source: &str) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::parse(
            source,
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, slot) in fields.iter_mut().enumerate() {
        let ws_start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == ws_start {
            return Err(Error::parse(source, pos, "expected whitespace in header"));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            let what = ["width", "height", "maxval"][i];
            return Err(Error::parse(source, pos, format!("expected {}", what)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *slot = text
            .parse()
            .map_err(|_| Error::parse(source, start, "header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::parse(source, pos, format!("maxval {} unsupported (need 255)", maxval)));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(source, pos, "zero image dimension"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse(source, pos, "expected one whitespace byte after maxval"));
    }
    Ok(PnmHeader {
        width,
        height,
        data_start: pos + 1,
    })
}

fn pnm_payload<'a>(bytes: &'a [u8], header: &PnmHeader, channels: usize, source: &str) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let have = bytes.len() - header.data_start;
    if have < need {
        return Err(Error::parse(
            source,
            bytes.len(),
            format!("truncated pixel data: {} of {} bytes", have, need),
        ));
    }
    if have > need {
        return Err(Error::parse(source, header.data_start + need, "trailing bytes after pixel data"));
    }
    Ok(&bytes[header.data_start..])
}

/// Decode P6 bytes into a `(1, 3, h, w)` tensor with values in [0, 1].
pub fn decode_ppm(bytes: &[u8], source: &str) -> Result<Tensor4> {
    let header = parse_pnm_header(bytes, b"P6", source)?;
    let payload = pnm_payload(bytes, &header, 3, source)?;
    let (h, w) = (header.height, header.width);
    let mut t = Tensor4::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                t.set(0, c, y, x, f64::from(payload[(y * w + x) * 3 + c]) / 255.0);
            }
        }
    }
    Ok(t)
}

pub fn encode_ppm(image: &Tensor4) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims();
    if n != 1 || c != 3 {
        return Err(Error::Data(format!("P6 needs a (1,3,h,w) image, got {:?}", image.dims())));
    }
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    out.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize(image.at(0, ch, y, x)));
            }
        }
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_pgm(bytes: &[u8], source: &str) -> Result<LabelMap> {
    let header = parse_pnm_header(bytes, b"P5", source)?;
    let payload = pnm_payload(bytes, &header, 1, source)?;
    LabelMap::new(header.height, header.width, payload.to_vec())
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    out
}

pub fn read_image(path: &Path) -> Result<Tensor4> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn write_image(path: &Path, image: &Tensor4) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    std::fs::write(path, encode_pgm(labels)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestClass {
    pub id: u8,
    pub name: String,
    pub color: [f64; 3],
    pub shape: Shape,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    pub ignore_index: u8,
    pub classes: Vec<ManifestClass>,
    /// Label id carried by canvas pixels when the background is labelled.
    pub background: Option<u8>,
    /// `(image, labels)` paths relative to `root`.
    pub entries: Vec<(PathBuf, PathBuf)>,
    /// Directory holding the manifest file.
    pub root: PathBuf,
}

/// An image with its label map, loaded from disk.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor4,
    pub labels: LabelMap,
}

impl DatasetManifest {
    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        self.classes.iter().map(|c| c.color.to_vec()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self) -> Result<SplitSpec> {
        let seen = self.classes.iter().filter(|c| c.seen).map(|c| c.id as usize).collect();
        let unseen = self.classes.iter().filter(|c| !c.seen).map(|c| c.id as usize).collect();
        SplitSpec::new(seen, unseen)
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].0)
    }

    pub fn label_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].1)
    }

    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let image = read_image(&self.image_path(i))?;
        let labels = read_labels(&self.label_path(i))?;
        if image.height() != labels.height() || image.width() != labels.width() {
            return Err(Error::Data(format!(
                "entry {}: image {}x{} vs labels {}x{}",
                i,
                image.height(),
                image.width(),
                labels.height(),
                labels.width()
            )));
        }
        Ok(Sample { image, labels })
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        (0..self.entries.len()).map(|i| self.load_sample(i)).collect()
    }

    pub fn to_text(&self) -> String {
        let join = |seen: bool| {
            self.classes
                .iter()
                .filter(|c| c.seen == seen)
                .map(|c| c.id.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        writeln!(s, "version={}", self.version).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "ignore_index={}", self.ignore_index).unwrap();
        writeln!(s, "seen={}", join(true)).unwrap();
        writeln!(s, "unseen={}", join(false)).unwrap();
        match self.background {
            Some(b) => writeln!(s, "background={}", b).unwrap(),
            None => writeln!(s, "background=none").unwrap(),
        }
        s.push_str("[classes]\n");
        for c in &self.classes {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                c.id,
                c.name,
                c.color[0],
                c.color[1],
                c.color[2],
                c.shape.name()
            )
            .unwrap();
        }
        s.push_str("[entries]\n");
        for (img, lab) in &self.entries {
            writeln!(s, "{},{}", img.display(), lab.display()).unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parse manifest text without touching the referenced files.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            Keys,
            Classes,
            Entries,
        }
        let mut section = Section::Keys;
        let mut version = None;
        let mut seed = None;
        let mut ignore_index = None;
        let mut seen_ids: Option<Vec<u8>> = None;
        let mut unseen_ids: Option<Vec<u8>> = None;
        let mut background = None;
        let mut classes: Vec<(u8, String, [f64; 3], Shape)> = Vec::new();
        let mut entries = Vec::new();

        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[classes]" => {
                    section = Section::Classes;
                    continue;
                }
                "[entries]" => {
                    section = Section::Entries;
                    continue;
                }
                _ => {}
            }
            match section {
                Section::Keys => {
                    let (key, value) = line
                        .split_once('=')
                        .ok_or_else(|| Error::manifest(line, "expected key=value"))?;
                    let (key, value) = (key.trim(), value.trim());
                    match key {
                        "version" => version = Some(value.to_string()),
                        "seed" => seed = Some(parse_num::<u64>("seed", value)?),
                        "ignore_index" => ignore_index = Some(parse_num::<u8>("ignore_index", value)?),
                        "seen" => seen_ids = Some(parse_ids("seen", value)?),
                        "unseen" => unseen_ids = Some(parse_ids("unseen", value)?),
                        "background" => {
                            background = Some(if value == "none" {
                                None
                            } else {
                                Some(parse_num::<u8>("background", value)?)
                            })
                        }
                        other => return Err(Error::manifest(other, "unknown key")),
                    }
                }
                Section::Classes => {
                    let cells: Vec<&str> = line.split(',').map(str::trim).collect();
                    if cells.len() != 6 {
                        return Err(Error::manifest("classes", format!("row `{}` needs 6 fields", line)));
                    }
                    let id = parse_num::<u8>("classes", cells[0])?;
                    let mut color = [0.0; 3];
                    for (c, cell) in color.iter_mut().zip(&cells[2..5]) {
                        *c = parse_num::<f64>("classes", cell)?;
                    }
                    let shape = Shape::parse(cells[5])
                        .ok_or_else(|| Error::manifest("classes", format!("unknown shape `{}`", cells[5])))?;
                    classes.push((id, cells[1].to_string(), color, shape));
                }
                Section::Entries => {
                    let (img, lab) = line
                        .split_once(',')
                        .ok_or_else(|| Error::manifest("entries", format!("row `{}` needs 2 paths", line)))?;
                    entries.push((PathBuf::from(img.trim()), PathBuf::from(lab.trim())));
                }
            }
        }

        let version = version.ok_or_else(|| Error::manifest("version", "missing"))?;
        if version != MANIFEST_VERSION {
            return Err(Error::manifest("version", format!("unsupported `{}`", version)));
        }
        let seen_ids = seen_ids.ok_or_else(|| Error::manifest("seen", "missing"))?;
        let unseen_ids = unseen_ids.ok_or_else(|| Error::manifest("unseen", "missing"))?;
        if let Some(c) = seen_ids.iter().find(|c| unseen_ids.contains(c)) {
            return Err(Error::manifest("seen", format!("class {} is also listed as unseen", c)));
        }
        for (i, (id, ..)) in classes.iter().enumerate() {
            if *id as usize != i {
                return Err(Error::manifest("classes", format!("ids must be dense, found {} at row {}", id, i)));
            }
        }
        for id in seen_ids.iter().chain(&unseen_ids) {
            if *id as usize >= classes.len() {
                return Err(Error::manifest("seen", format!("class {} not in the class table", id)));
            }
        }
        let classes: Vec<ManifestClass> = classes
            .into_iter()
            .map(|(id, name, color, shape)| {
                if seen_ids.contains(&id) {
                    Ok(ManifestClass { id, name, color, shape, seen: true })
                } else if unseen_ids.contains(&id) {
                    Ok(ManifestClass { id, name, color, shape, seen: false })
                } else {
                    Err(Error::manifest("unseen", format!("class {} is neither seen nor unseen", id)))
                }
            })
            .collect::<Result<_>>()?;
        if classes.is_empty() {
            return Err(Error::manifest("classes", "empty class table"));
        }
        let ignore_index = ignore_index.ok_or_else(|| Error::manifest("ignore_index", "missing"))?;
        let background = background.unwrap_or(None);
        if let Some(b) = background {
            if b as usize != classes.len() || b == ignore_index {
                return Err(Error::manifest(
                    "background",
                    format!("background id must be {} (one past the classes)", classes.len()),
                ));
            }
        }
        Ok(Self {
            version,
            seed: seed.ok_or_else(|| Error::manifest("seed", "missing"))?,
            ignore_index,
            classes,
            background,
            entries,
            root: root.to_path_buf(),
        })
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::manifest(field, format!("`{}`: {}", value, e)))
}

fn parse_ids(field: &str, value: &str) -> Result<Vec<u8>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num::<u8>(field, v.trim())).collect()
}

/// Read, validate and check every referenced file of a manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = DatasetManifest::parse(&text, &root)?;
    for i in 0..m.entries.len() {
        for p in [m.image_path(i), m.label_path(i)] {
            if !p.is_file() {
                return Err(Error::manifest("entries", format!("missing file {}", p.display())));
            }
        }
        let sample = m.load_sample(i)?;
        let limit = m.classes.len() + usize::from(m.background.is_some());
        if let Some(&bad) = sample
            .labels
            .data()
            .iter()
            .find(|&&v| v != m.ignore_index && v as usize >= limit)
        {
            return Err(Error::manifest(
                "entries",
                format!("{} holds label {} outside the class table", m.label_path(i).display(), bad),
            ));
        }
    }
    m.split()
        .map_err(|e| Error::manifest("seen", e.to_string()))?;
    Ok(m)
}
