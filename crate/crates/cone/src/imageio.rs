//! Image codecs (PNG and binary PPM), dataset directory scanning, and binary
//! checkpoint serialization.

use crate::autodiff::BnState;
use crate::cem::CrfVariant;
use crate::error::{Error, Result};
use crate::iem::{ConvBnLayer, ConvLayer, EnhNetWeights, SelfCalWeights};
use crate::losses::LossConfig;
use crate::optim::{TrainConfig, TrainMode};
use crate::tensor::Tensor;
use std::fs;
use std::path::{Path, PathBuf};

/// 8-bit RGB image, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<ImageU8> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(ImageU8 { width, height, pixels })
    }
}

/// Decode a PNG or binary PPM file, dispatching on content.
pub fn load_image(path: &Path) -> Result<ImageU8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        });
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageRgb8(b) => {
            ImageU8::new(b.width() as usize, b.height() as usize, b.into_raw())
        }
        image::DynamicImage::ImageRgba8(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            let raw = b.into_raw();
            let pixels = raw.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
            ImageU8::new(w, h, pixels)
        }
        other => Err(Error::Data(format!(
            "{}: unsupported pixel format {:?}, expected 8-bit RGB or RGBA",
            path.display(),
            other.color()
        ))),
    }
}

/// Encode as PNG or PPM depending on the file extension.
pub fn save_image_u8(img: &ImageU8, path: &Path) -> Result<()> {
    match extension(path).as_deref() {
        Some("ppm") => fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path.to_path_buf(), e)),
        Some("png") => {
            let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
                .expect("pixel count checked at construction");
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        }
        _ => Err(Error::Config(format!(
            "{}: unsupported image extension, use .png or .ppm",
            path.display()
        ))),
    }
}

/// Quantize to 8 bits (clamp to [0, 1], round half up) and save.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    save_image_u8(&from_tensor(t)?, path)
}

/// Planar [3, H, W] tensor in [0, 1] from interleaved bytes.
pub fn to_tensor(img: &ImageU8) -> Tensor {
    let n = img.width * img.height;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, img.height, img.width], data).expect("image dims positive")
}

/// Interleaved bytes from a [3, H, W] tensor.
pub fn from_tensor(t: &Tensor) -> Result<ImageU8> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels for image output, got {c}")));
    }
    let n = h * w;
    let mut pixels = vec![0u8; 3 * n];
    for i in 0..n {
        for ch in 0..3 {
            pixels[i * 3 + ch] = (t.data()[ch * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    ImageU8::new(w, h, pixels)
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageU8> {
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        *f = ppm_field(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Data(format!(
            "PPM maxval {maxval} unsupported, only 8-bit (255) images are accepted"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Data(format!("PPM truncated: need {need} raster bytes")))?;
    ImageU8::new(width, height, raster.to_vec())
}

/// One whitespace/comment-separated decimal header field.
fn ppm_field(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while !matches!(bytes.get(*pos), None | Some(b'\n')) {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(b) => return Err(Error::Data(format!("PPM header has stray byte {b:#04x}"))),
            None => return Err(Error::Data("PPM header ended early".into())),
        }
    }
    let mut v = 0usize;
    while let Some(b) = bytes.get(*pos).filter(|b| b.is_ascii_digit()) {
        v = v * 10 + (b - b'0') as usize;
        if v > 1 << 24 {
            return Err(Error::Data("PPM header field out of range".into()));
        }
        *pos += 1;
    }
    Ok(v)
}

fn encode_ppm(img: &ImageU8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Dataset split selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One low-light image, optionally paired with a reference by file stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub stem: String,
    pub low: PathBuf,
    pub reference: Option<PathBuf>,
}

/// A scanned dataset split with lexicographically ordered entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<DatasetEntry>,
}

/// Scan root/{train,test}/{low,high}. The train split refuses a reference
/// directory so training stays unsupervised by construction; in the test
/// split a reference is attached to the low entry with the same stem.
pub fn scan_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let split_dir = root.join(match split {
        Split::Train => "train",
        Split::Test => "test",
    });
    let high_dir = split_dir.join("high");
    if split == Split::Train && high_dir.is_dir() {
        return Err(Error::Data(format!(
            "{}: training is unsupervised and must not see a reference directory",
            high_dir.display()
        )));
    }
    let low = list_images(&split_dir.join("low"))?;
    if low.is_empty() {
        return Err(Error::Data(format!(
            "{}: no .png or .ppm images found",
            split_dir.join("low").display()
        )));
    }

    let mut refs = if split == Split::Test && high_dir.is_dir() {
        list_images(&high_dir)?
    } else {
        Vec::new()
    };
    let mut entries: Vec<DatasetEntry> = low
        .into_iter()
        .map(|(stem, path)| DatasetEntry { stem, low: path, reference: None })
        .collect();
    for (stem, path) in refs.drain(..) {
        match entries.iter_mut().find(|e| e.stem == stem) {
            Some(e) => e.reference = Some(path),
            None => eprintln!(
                "warning: reference {} has no matching low image, skipped",
                path.display()
            ),
        }
    }
    Ok(Dataset { root: root.to_path_buf(), split, entries })
}

/// (stem, path) pairs for supported images, sorted by file name bytes.
fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir.to_path_buf(), e))?;
        let path = entry.path();
        if !matches!(extension(&path).as_deref(), Some("png") | Some("ppm")) {
            continue;
        }
        let stem = match path.file_stem() {
            Some(s) => s.to_string_lossy().into_owned(),
            None => continue,
        };
        out.push((stem, path));
    }
    out.sort_by(|a, b| a.1.file_name().cmp(&b.1.file_name()));
    Ok(out)
}

/// Trained model plus the exact configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub theta_a: f32,
    pub theta_b: f32,
    pub enh: EnhNetWeights,
    pub selfcal: SelfCalWeights,
}

impl Checkpoint {
    pub fn variant(&self) -> CrfVariant {
        self.train_cfg.variant
    }

    pub fn mode(&self) -> TrainMode {
        self.train_cfg.mode
    }
}

const MAGIC: &[u8; 4] = b"CONE";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    put_u32(&mut w, VERSION);
    w.push(c.train_cfg.variant.tag());
    w.push(c.train_cfg.mode.tag());
    put_f32(&mut w, c.theta_a);
    put_f32(&mut w, c.theta_b);
    put_u32(&mut w, c.train_cfg.stages as u32);

    let l = &c.loss_cfg;
    put_f32(&mut w, l.omega_f);
    put_f32(&mut w, l.omega_c);
    put_f32(&mut w, l.epsilon);
    put_u32(&mut w, l.exposure_pool as u32);
    put_u32(&mut w, l.spatial_pool as u32);
    put_f32(&mut w, l.smooth_lambda);

    let t = &c.train_cfg;
    put_u32(&mut w, t.epochs as u32);
    put_f32(&mut w, t.lr_iem);
    put_f32(&mut w, t.lr_cem);
    put_f32(&mut w, t.cem_decay);
    put_u32(&mut w, t.cem_decay_every as u32);
    put_f32(&mut w, t.weight_decay);
    put_f32(&mut w, t.beta1);
    put_f32(&mut w, t.beta2);
    put_f32(&mut w, t.adam_eps);
    w.extend_from_slice(&t.seed.to_le_bytes());
    // Initial θ from the config, distinct from the trained θ above.
    put_f32(&mut w, t.theta_a);
    put_f32(&mut w, t.theta_b);

    put_u32(&mut w, c.enh.blocks.len() as u32);
    for b in &c.enh.blocks {
        put_slice(&mut w, b.kernels.data());
        put_slice(&mut w, b.bias.data());
    }
    put_conv_bn(&mut w, &c.selfcal.input);
    put_u32(&mut w, c.selfcal.middle.len() as u32);
    for m in &c.selfcal.middle {
        put_conv_bn(&mut w, m);
    }
    put_slice(&mut w, c.selfcal.output.kernels.data());
    put_slice(&mut w, c.selfcal.output.bias.data());
    w
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(w: &mut Vec<u8>, v: f32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_slice(w: &mut Vec<u8>, data: &[f32]) {
    put_u32(w, data.len() as u32);
    for v in data {
        put_f32(w, *v);
    }
}

fn put_conv_bn(w: &mut Vec<u8>, l: &ConvBnLayer) {
    put_slice(w, l.conv.kernels.data());
    put_slice(w, l.conv.bias.data());
    put_slice(w, l.gamma.data());
    put_slice(w, l.beta.data());
    put_slice(w, &l.bn.running_mean);
    put_slice(w, &l.bn.running_var);
    w.push(l.bn.initialized as u8);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: &str) -> Error {
        Error::Data(format!("checkpoint corrupt at byte {}: {msg}", self.pos))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.corrupt(&format!("need {n} more bytes")))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn vec(&mut self, expect: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let count = self.u32()? as usize;
        if count != expect {
            self.pos = start;
            return Err(self.corrupt(&format!("{what} declares {count} values, expected {expect}")));
        }
        let raw = self.bytes(4 * count)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn tensor(&mut self, shape: Vec<usize>, what: &str) -> Result<Tensor> {
        let data = self.vec(shape.iter().product(), what)?;
        Tensor::new(shape, data)
    }
}

fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.bytes(4)? != MAGIC {
        r.pos = 0;
        return Err(r.corrupt("bad magic, not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.corrupt(&format!("unsupported version {version}, expected {VERSION}")));
    }
    let variant = CrfVariant::from_tag(r.u8()?)
        .map_err(|_| Error::Data(format!("checkpoint corrupt at byte {}: unknown variant tag", r.pos - 1)))?;
    let mode = TrainMode::from_tag(r.u8()?)
        .map_err(|_| Error::Data(format!("checkpoint corrupt at byte {}: unknown mode tag", r.pos - 1)))?;
    let theta_a = r.f32()?;
    let theta_b = r.f32()?;
    let stages = r.u32()? as usize;

    let loss_cfg = LossConfig {
        omega_f: r.f32()?,
        omega_c: r.f32()?,
        epsilon: r.f32()?,
        exposure_pool: r.u32()? as usize,
        spatial_pool: r.u32()? as usize,
        smooth_lambda: r.f32()?,
    };
    let train_cfg = TrainConfig {
        epochs: r.u32()? as usize,
        lr_iem: r.f32()?,
        lr_cem: r.f32()?,
        cem_decay: r.f32()?,
        cem_decay_every: r.u32()? as usize,
        weight_decay: r.f32()?,
        beta1: r.f32()?,
        beta2: r.f32()?,
        adam_eps: r.f32()?,
        seed: r.u64()?,
        stages,
        mode,
        variant,
        theta_a: r.f32()?,
        theta_b: r.f32()?,
    };

    let nblocks = r.u32()? as usize;
    if nblocks != 4 {
        return Err(Error::Data(format!(
            "checkpoint corrupt at byte {}: expected 4 enhancement blocks, found {nblocks}",
            r.pos - 4
        )));
    }
    let mut blocks = Vec::with_capacity(4);
    for i in 0..4 {
        blocks.push(ConvLayer {
            kernels: r.tensor(vec![3, 3, 3, 3], &format!("enhancement block {i} kernels"))?,
            bias: r.tensor(vec![3], &format!("enhancement block {i} bias"))?,
        });
    }
    let enh = EnhNetWeights { blocks };

    let input = read_conv_bn(&mut r, 3, 16, "self-calibration input block")?;
    let nmiddle = r.u32()? as usize;
    if nmiddle != 6 {
        return Err(Error::Data(format!(
            "checkpoint corrupt at byte {}: expected 6 middle blocks, found {nmiddle}",
            r.pos - 4
        )));
    }
    let mut middle = Vec::with_capacity(6);
    for i in 0..6 {
        middle.push(read_conv_bn(&mut r, 16, 16, &format!("self-calibration middle block {i}"))?);
    }
    let output = ConvLayer {
        kernels: r.tensor(vec![3, 16, 3, 3], "self-calibration output kernels")?,
        bias: r.tensor(vec![3], "self-calibration output bias")?,
    };
    if r.pos != bytes.len() {
        return Err(r.corrupt(&format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    Ok(Checkpoint {
        train_cfg,
        loss_cfg,
        theta_a,
        theta_b,
        enh,
        selfcal: SelfCalWeights { input, middle, output },
    })
}

fn read_conv_bn(r: &mut Reader, ci: usize, co: usize, what: &str) -> Result<ConvBnLayer> {
    let kernels = r.tensor(vec![co, ci, 3, 3], &format!("{what} kernels"))?;
    let bias = r.tensor(vec![co], &format!("{what} bias"))?;
    let gamma = r.tensor(vec![co], &format!("{what} gamma"))?;
    let beta = r.tensor(vec![co], &format!("{what} beta"))?;
    let running_mean = r.vec(co, &format!("{what} running mean"))?;
    let running_var = r.vec(co, &format!("{what} running variance"))?;
    let initialized = r.u8()? != 0;
    let mut bn = BnState::new(co);
    bn.running_mean = running_mean;
    bn.running_var = running_var;
    bn.initialized = initialized;
    Ok(ConvBnLayer { conv: ConvLayer { kernels, bias }, gamma, beta, bn })
}
