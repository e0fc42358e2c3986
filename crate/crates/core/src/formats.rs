//! On-disk formats: frame datasets, label/latent/report CSVs and the model
//! bundle directory.
//!
//! Binary files are little-endian. Weights are written as `f64` so a saved
//! bundle scores exactly like the in-memory one.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::amjpf::{AmjpfConfig, AnomalyReport, GainForm, RegimeModel};
use crate::cluster::{ClusterModel, FeatureScaling, TransitionMatrix};
use crate::dynamics::DynamicsNet;
use crate::error::{Error, Result};
use crate::gs::UkfParams;
use crate::linalg::Matrix;
use crate::mlp::{Activation, Layer, MlpParams};
use crate::pipeline::{Bundle, Calibration};
use crate::vae::{Frame, LatentFrame, VaeParams};

pub const DATASET_MAGIC: &[u8; 4] = b"LMJF";
pub const DATASET_VERSION: u32 = 1;
const MATRIX_MAGIC: &[u8; 4] = b"LMJM";
const LAYER_MAGIC: &[u8; 4] = b"LMJL";
const BLOCK_VERSION: u32 = 1;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    what: String,
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(what: impl Into<String>, bytes: &'a [u8]) -> Self {
        Self {
            what: what.into(),
            bytes,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::format(&self.what, "unexpected end of file"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(&self.what, "bad magic bytes"));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::format(&self.what, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        b.copy_from_slice(self.take(4)?);
        Ok(u32::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(&self.what, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if !self.bytes.is_empty() {
            return Err(Error::format(&self.what, format!("{} trailing bytes", self.bytes.len())));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

// ---- frame dataset ----

pub fn encode_frames(frames: &[Frame]) -> Result<Vec<u8>> {
    let (w, h) = frames.first().map_or((0, 0), |f| (f.width(), f.height()));
    if frames.iter().any(|f| (f.width(), f.height()) != (w, h)) {
        return Err(Error::invalid("frames differ in size"));
    }
    let mut out = Vec::with_capacity(20 + frames.len() * w * h * 4);
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION as usize)?;
    put_u32(&mut out, frames.len())?;
    put_u32(&mut out, w)?;
    put_u32(&mut out, h)?;
    for f in frames {
        for &p in f.pixels() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_frames(bytes: &[u8]) -> Result<Vec<Frame>> {
    let mut r = Reader::new("frame dataset", bytes);
    r.magic(DATASET_MAGIC, DATASET_VERSION)?;
    let count = r.u32()? as usize;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let px = w * h;
    let raw = r.take(count * px * 4)?;
    r.finish()?;
    raw.chunks_exact(px.max(1) * 4)
        .take(count)
        .enumerate()
        .map(|(k, c)| {
            let pixels = c
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
                .collect();
            Frame::new(w, h, pixels).map_err(|e| e.at_frame(k))
        })
        .collect()
}

pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    write_file(path, &encode_frames(frames)?)
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    decode_frames(&read_file(path)?)
}

// ---- CSV files ----

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn csv_finish(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    write_file(path, &bytes)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path.display().to_string(), e.to_string())
}

fn csv_rows(path: &Path, expect_header: &[String]) -> Result<Vec<csv::StringRecord>> {
    let bytes = read_file(path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(expect_header.iter().map(String::as_str)) {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected header {}", expect_header.join(",")),
        ));
    }
    r.records().map(|rec| rec.map_err(csv_err(path))).collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::format(path.display().to_string(), format!("line {line}: bad value in column {}", i + 1)))
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn parse_flag(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<bool> {
    match field::<u8>(path, rec, i)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::format(path.display().to_string(), format!("flag must be 0 or 1, got {v}"))),
    }
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn write_labels(path: &Path, labels: &[bool]) -> Result<()> {
    let mut w = csv_writer();
    w.write_record(["frame", "abnormal"]).map_err(csv_err(path))?;
    for (k, &l) in labels.iter().enumerate() {
        w.write_record([k.to_string().as_str(), flag(l)]).map_err(csv_err(path))?;
    }
    csv_finish(path, w)
}

pub fn read_labels(path: &Path) -> Result<Vec<bool>> {
    let rows = csv_rows(path, &strings(&["frame", "abnormal"]))?;
    rows.iter()
        .enumerate()
        .map(|(k, rec)| {
            if field::<usize>(path, rec, 0)? != k {
                return Err(Error::format(path.display().to_string(), format!("row {k} is out of order")));
            }
            parse_flag(path, rec, 1)
        })
        .collect()
}

fn latent_header(l: usize) -> Vec<String> {
    (0..l)
        .map(|i| format!("mu_{i}"))
        .chain((0..l).map(|i| format!("s2_{i}")))
        .collect()
}

pub fn write_latents(path: &Path, latents: &[LatentFrame]) -> Result<()> {
    let l = latents.first().map_or(0, LatentFrame::dim);
    if latents.iter().any(|f| f.dim() != l) {
        return Err(Error::invalid("latent frames differ in dimension"));
    }
    let mut w = csv_writer();
    w.write_record(latent_header(l)).map_err(csv_err(path))?;
    for f in latents {
        w.write_record(f.mu.iter().chain(&f.sigma2).map(f64::to_string))
            .map_err(csv_err(path))?;
    }
    csv_finish(path, w)
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentFrame>> {
    let bytes = read_file(path)?;
    let mut r = csv::ReaderBuilder::new().from_reader(bytes.as_slice());
    let cols = r.headers().map_err(csv_err(path))?.len();
    if cols == 0 || cols % 2 != 0 {
        return Err(Error::format(path.display().to_string(), "header must list mu and s2 columns"));
    }
    let l = cols / 2;
    drop(r);
    let rows = csv_rows(path, &latent_header(l))?;
    rows.iter()
        .enumerate()
        .map(|(k, rec)| {
            let v = (0..cols).map(|i| field::<f64>(path, rec, i)).collect::<Result<Vec<_>>>()?;
            LatentFrame::new(v[..l].to_vec(), v[l..].to_vec()).map_err(|e| e.at_frame(k))
        })
        .collect()
}

const REPORT_HEADER: [&str; 6] = ["frame", "y", "thresh", "raw_flag", "final_flag", "winning_cluster"];

pub fn write_report(path: &Path, report: &AnomalyReport) -> Result<()> {
    let mut w = csv_writer();
    w.write_record(REPORT_HEADER).map_err(csv_err(path))?;
    for i in 0..report.len() {
        w.write_record([
            report.frames[i].to_string(),
            report.y[i].to_string(),
            report.threshold.to_string(),
            flag(report.raw_flags[i]).to_string(),
            flag(report.flags[i]).to_string(),
            report.winners[i].to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    csv_finish(path, w)
}

/// A report read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub frames: Vec<usize>,
    pub y: Vec<f64>,
    pub threshold: f64,
    pub raw_flags: Vec<bool>,
    pub flags: Vec<bool>,
    pub winners: Vec<usize>,
}

pub fn read_report(path: &Path) -> Result<ReportTable> {
    let rows = csv_rows(path, &strings(&REPORT_HEADER))?;
    let mut t = ReportTable {
        frames: Vec::with_capacity(rows.len()),
        y: Vec::with_capacity(rows.len()),
        threshold: f64::NAN,
        raw_flags: Vec::with_capacity(rows.len()),
        flags: Vec::with_capacity(rows.len()),
        winners: Vec::with_capacity(rows.len()),
    };
    for rec in &rows {
        t.frames.push(field(path, rec, 0)?);
        t.y.push(field(path, rec, 1)?);
        t.threshold = field(path, rec, 2)?;
        t.raw_flags.push(parse_flag(path, rec, 3)?);
        t.flags.push(parse_flag(path, rec, 4)?);
        t.winners.push(field(path, rec, 5)?);
    }
    Ok(t)
}

// ---- bundle ----

fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + m.as_slice().len() * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    put_u32(&mut out, BLOCK_VERSION as usize)?;
    put_u32(&mut out, m.rows())?;
    put_u32(&mut out, m.cols())?;
    put_f64s(&mut out, m.as_slice());
    Ok(out)
}

fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_file(path, &encode_matrix(m)?)
}

fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path.display().to_string(), &bytes);
    r.magic(MATRIX_MAGIC, BLOCK_VERSION)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f64s(rows * cols)?;
    r.finish()?;
    Matrix::from_vec(rows, cols, data)
}

fn write_layer(path: &Path, layer: &Layer) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(LAYER_MAGIC);
    put_u32(&mut out, BLOCK_VERSION as usize)?;
    put_u32(&mut out, layer.outputs())?;
    put_u32(&mut out, layer.inputs())?;
    put_f64s(&mut out, layer.weights.as_slice());
    put_f64s(&mut out, &layer.bias);
    write_file(path, &out)
}

fn read_layer(path: &Path) -> Result<Layer> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path.display().to_string(), &bytes);
    r.magic(LAYER_MAGIC, BLOCK_VERSION)?;
    let outputs = r.u32()? as usize;
    let inputs = r.u32()? as usize;
    let weights = Matrix::from_vec(outputs, inputs, r.f64s(outputs * inputs)?)?;
    let bias = r.f64s(outputs)?;
    r.finish()?;
    Ok(Layer { weights, bias })
}

fn write_net(dir: &Path, prefix: &str, net: &MlpParams) -> Result<()> {
    for (i, layer) in net.layers().iter().enumerate() {
        write_layer(&dir.join(format!("{prefix}_{i}.bin")), layer)?;
    }
    Ok(())
}

fn read_net(dir: &Path, prefix: &str, sizes: &[usize], activation: Activation) -> Result<MlpParams> {
    if sizes.len() < 2 {
        return Err(Error::format(dir.display().to_string(), format!("{prefix} needs at least two sizes")));
    }
    let layers = (0..sizes.len() - 1)
        .map(|i| read_layer(&dir.join(format!("{prefix}_{i}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    let net = MlpParams::from_layers(layers, activation)?;
    if net.sizes() != sizes {
        return Err(Error::format(
            dir.display().to_string(),
            format!("{prefix} layer files do not match sizes {sizes:?}"),
        ));
    }
    Ok(net)
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    write_file(path, text.as_bytes())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VaeManifest {
    width: usize,
    height: usize,
    latent_dim: usize,
    activation: Activation,
    encoder_sizes: Vec<usize>,
    decoder_sizes: Vec<usize>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterManifest {
    clusters: usize,
    latent_dim: usize,
    smoothing: f64,
    counts: Vec<usize>,
    scaling_offset: Vec<f64>,
    scaling_scale: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsManifest {
    cluster: usize,
    fallback: bool,
    activation: Activation,
    sizes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationManifest {
    threshold: f64,
    window: usize,
    tau: f64,
    particles: usize,
    ukf_alpha: f64,
    ukf_beta: f64,
    ukf_kappa: f64,
    gain: GainForm,
    seed: u64,
}

fn stack_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    Matrix::from_rows(rows)
}

/// Writes the bundle into `dir`, creating it if needed.
pub fn save_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    let cal = &bundle.calibration;
    let vae = &bundle.vae;
    let vae_dir = dir.join("vae");
    let (width, height) = vae.frame_shape();
    write_toml(
        &vae_dir.join("manifest.toml"),
        &VaeManifest {
            width,
            height,
            latent_dim: vae.latent_dim(),
            activation: vae.encoder.activation(),
            encoder_sizes: vae.encoder.sizes(),
            decoder_sizes: vae.decoder.sizes(),
            seed: cal.filter.seed,
        },
    )?;
    write_net(&vae_dir, "encoder", &vae.encoder)?;
    write_net(&vae_dir, "decoder", &vae.decoder)?;

    let regime = &bundle.regime;
    let cm = &regime.clusters;
    let c = cm.num_clusters();
    let cl_dir = dir.join("clusters");
    write_toml(
        &cl_dir.join("manifest.toml"),
        &ClusterManifest {
            clusters: c,
            latent_dim: cm.latent_dim(),
            smoothing: regime.transitions.smoothing,
            counts: cm.counts.clone(),
            scaling_offset: cm.scaling.offset.clone(),
            scaling_scale: cm.scaling.scale.clone(),
        },
    )?;
    write_matrix(&cl_dir.join("centroids.bin"), &stack_rows(&cm.centroids)?)?;
    let d = cm.state_dim();
    let mut covs = Matrix::zeros(c * d, d);
    for (s, q) in cm.covariances.iter().enumerate() {
        covs.set_block(s * d, 0, q);
    }
    write_matrix(&cl_dir.join("covariances.bin"), &covs)?;
    write_matrix(&cl_dir.join("radii.bin"), &Matrix::column(&cm.radii))?;
    write_matrix(&cl_dir.join("transitions.bin"), &regime.transitions.probs)?;

    for dynamics in &regime.dynamics {
        let dd = dir.join("dynamics").join(format!("cluster_{}", dynamics.cluster));
        write_toml(
            &dd.join("manifest.toml"),
            &DynamicsManifest {
                cluster: dynamics.cluster,
                fallback: dynamics.fallback,
                activation: dynamics.net.activation(),
                sizes: dynamics.net.sizes(),
            },
        )?;
        write_net(&dd, "layer", &dynamics.net)?;
        write_matrix(&dd.join("noise.bin"), &Matrix::column(&dynamics.noise.diag()))?;
    }

    write_toml(
        &dir.join("calibration.toml"),
        &CalibrationManifest {
            threshold: cal.threshold,
            window: cal.filter.window,
            tau: cal.filter.tau,
            particles: cal.filter.particles,
            ukf_alpha: cal.filter.ukf.alpha,
            ukf_beta: cal.filter.ukf.beta,
            ukf_kappa: cal.filter.ukf.kappa,
            gain: cal.filter.gain,
            seed: cal.filter.seed,
        },
    )
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("bundle directory {} does not exist", dir.display())));
    }
    let vae_dir = dir.join("vae");
    let vm: VaeManifest = read_toml(&vae_dir.join("manifest.toml"))?;
    let vae = VaeParams::from_parts(
        read_net(&vae_dir, "encoder", &vm.encoder_sizes, vm.activation)?,
        read_net(&vae_dir, "decoder", &vm.decoder_sizes, vm.activation)?,
        vm.latent_dim,
        (vm.width, vm.height),
    )?;

    let cl_dir = dir.join("clusters");
    let cm: ClusterManifest = read_toml(&cl_dir.join("manifest.toml"))?;
    let d = 2 * cm.latent_dim;
    let bad = |detail: &str| Error::format(cl_dir.display().to_string(), detail.to_string());
    let centroids = read_matrix(&cl_dir.join("centroids.bin"))?;
    let covs = read_matrix(&cl_dir.join("covariances.bin"))?;
    let radii = read_matrix(&cl_dir.join("radii.bin"))?;
    let probs = read_matrix(&cl_dir.join("transitions.bin"))?;
    if centroids.shape() != (cm.clusters, d)
        || covs.shape() != (cm.clusters * d, d)
        || radii.shape() != (cm.clusters, 1)
        || probs.shape() != (cm.clusters, cm.clusters)
    {
        return Err(bad("block shapes disagree with the manifest"));
    }
    let clusters = ClusterModel {
        centroids: (0..cm.clusters).map(|s| centroids.row(s).to_vec()).collect(),
        covariances: (0..cm.clusters).map(|s| covs.block(s * d, 0, d, d)).collect(),
        radii: radii.into_vec(),
        counts: cm.counts,
        scaling: FeatureScaling {
            offset: cm.scaling_offset,
            scale: cm.scaling_scale,
        },
    };
    let transitions = TransitionMatrix {
        probs,
        smoothing: cm.smoothing,
    };

    let dynamics = (0..cm.clusters)
        .map(|s| {
            let dd = dir.join("dynamics").join(format!("cluster_{s}"));
            let m: DynamicsManifest = read_toml(&dd.join("manifest.toml"))?;
            if m.cluster != s {
                return Err(Error::format(dd.display().to_string(), "manifest names another cluster"));
            }
            Ok(DynamicsNet {
                cluster: s,
                net: read_net(&dd, "layer", &m.sizes, m.activation)?,
                noise: Matrix::from_diag(&read_matrix(&dd.join("noise.bin"))?.into_vec()),
                fallback: m.fallback,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let regime = RegimeModel {
        clusters,
        transitions,
        dynamics,
    };
    regime.validate()?;
    if regime.latent_dim() != vae.latent_dim() {
        return Err(Error::invalid("VAE and cluster model disagree on the latent dimension"));
    }

    let cal: CalibrationManifest = read_toml(&dir.join("calibration.toml"))?;
    let filter = AmjpfConfig {
        particles: cal.particles,
        ukf: UkfParams {
            alpha: cal.ukf_alpha,
            beta: cal.ukf_beta,
            kappa: cal.ukf_kappa,
        },
        tau: cal.tau,
        window: cal.window,
        gain: cal.gain,
        seed: cal.seed,
    };
    filter.validate()?;
    Ok(Bundle {
        vae,
        regime,
        calibration: Calibration {
            threshold: cal.threshold,
            filter,
        },
    })
}

/// Reads the first bytes of `path` to tell datasets from other files.
pub fn is_frame_dataset(path: &Path) -> bool {
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map(|_| &magic == DATASET_MAGIC)
        .unwrap_or(false)
}
