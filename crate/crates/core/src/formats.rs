//! On-disk formats: pattern and model binaries, manifest and feature CSVs.
//!
//! All binary numbers are little-endian.
//!
//! Pattern file:
//! `"TPAT"`, u32 version (1), u32 grid side, u32 species count `N`,
//! f64 × 5 parameters (a, b, c, δ, s), f64 elapsed time, u8 converged,
//! then `N · side²` f64 values, species by species, each row-major.
//!
//! Model file:
//! `"TMOD"`, u32 version (1), u8 method tag (1 SVR, 2 OVK, 3 FFNN), then the
//! [`ModelMeta`] block and the method payload, see [`encode_model`].

use std::fs;
use std::io::Write;
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::kernels::{KernelKind, KernelSpec};
use crate::model::GmParams;
use crate::neural::FfnnModel;
use crate::ovk::OvkModel;
use crate::simulate::PatternField;
use crate::svr::SvrModel;

pub const PATTERN_MAGIC: &[u8; 4] = b"TPAT";
pub const MODEL_MAGIC: &[u8; 4] = b"TMOD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn string(&mut self, s: &str) {
        self.len(s.len());
        self.bytes(s.as_bytes());
    }
    fn rows(&mut self, rows: &[Vec<f64>]) {
        let dim = rows.first().map_or(0, Vec::len);
        self.len(rows.len());
        self.len(dim);
        rows.iter().flatten().for_each(|&x| self.f64(x));
    }
    /// Row count, column count, then column-major values.
    fn mat(&mut self, m: &Mat<f64>) {
        self.len(m.nrows());
        self.len(m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                self.f64(m[(i, j)]);
            }
        }
    }
    fn kernel(&mut self, k: &KernelSpec) {
        self.u8(kernel_tag(k.kind));
        self.f64(k.gamma);
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        // Every stored element takes at least one byte.
        if n > self.buf.len() - self.pos.min(self.buf.len()) + 8 {
            return Err(Error::Format(format!("implausible length {n}")));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
    fn rows(&mut self) -> Result<Vec<Vec<f64>>> {
        let n = self.len()?;
        let dim = self.len()?;
        (0..n).map(|_| (0..dim).map(|_| self.f64()).collect()).collect()
    }
    fn mat(&mut self) -> Result<Mat<f64>> {
        let r = self.len()?;
        let c = self.len()?;
        let vals: Vec<f64> = (0..r * c).map(|_| self.f64()).collect::<Result<_>>()?;
        Ok(Mat::from_fn(r, c, |i, j| vals[j * r + i]))
    }
    fn kernel(&mut self) -> Result<KernelSpec> {
        let kind = kernel_from_tag(self.u8()?)?;
        let gamma = self.f64()?;
        let spec = KernelSpec { kind, gamma };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(spec)
    }
    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

fn kernel_tag(kind: KernelKind) -> u8 {
    match kind {
        KernelKind::Chi2Symmetric => 1,
        KernelKind::Chi2Exponential => 2,
        KernelKind::Wasserstein => 3,
        KernelKind::GaussianOutput => 4,
    }
}

fn kernel_from_tag(tag: u8) -> Result<KernelKind> {
    Ok(match tag {
        1 => KernelKind::Chi2Symmetric,
        2 => KernelKind::Chi2Exponential,
        3 => KernelKind::Wasserstein,
        4 => KernelKind::GaussianOutput,
        t => return Err(Error::Format(format!("unknown kernel tag {t}"))),
    })
}

pub fn encode_pattern(p: &PatternField) -> Result<Vec<u8>> {
    p.validate()?;
    let mut w = ByteWriter::default();
    w.bytes(PATTERN_MAGIC);
    w.u32(FORMAT_VERSION);
    w.len(p.grid.side());
    w.len(p.species.len());
    p.params.to_array().iter().for_each(|&x| w.f64(x));
    w.f64(p.elapsed_time);
    w.u8(p.converged as u8);
    p.species.iter().flatten().for_each(|&x| w.f64(x));
    Ok(w.buf)
}

pub fn decode_pattern(bytes: &[u8]) -> Result<PatternField> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != PATTERN_MAGIC {
        return Err(Error::Format("not a pattern file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported pattern version {version}")));
    }
    let side = r.u32()? as usize;
    let count = r.u32()? as usize;
    let grid = TorusGrid::new(side).map_err(|e| Error::Format(e.to_string()))?;
    let params: Vec<f64> = (0..5).map(|_| r.f64()).collect::<Result<_>>()?;
    let params = GmParams {
        a: params[0],
        b: params[1],
        c: params[2],
        delta: params[3],
        s: params[4],
    };
    let elapsed_time = r.f64()?;
    let converged = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("invalid converged flag {v}"))),
    };
    let expected = count.checked_mul(grid.len()).and_then(|n| n.checked_mul(8));
    if expected != Some(bytes.len() - r.pos) {
        return Err(Error::Format(format!(
            "pattern payload holds {} bytes, expected {count} species × {side}²",
            bytes.len() - r.pos
        )));
    }
    let species = (0..count)
        .map(|_| (0..grid.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let field = PatternField {
        grid,
        species,
        params,
        elapsed_time,
        converged,
    };
    field.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(field)
}

pub fn write_pattern(path: &Path, p: &PatternField) -> Result<()> {
    write_atomic(path, &encode_pattern(p)?)
}

pub fn read_pattern(path: &Path) -> Result<PatternField> {
    decode_pattern(&fs::read(path)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// How inputs were built from a pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub radius: f64,
    pub bins: usize,
    pub r_max: f64,
    pub epsilon_weight: f64,
    pub species: usize,
    /// Append `c_m` and `n_c` to the histogram.
    pub extras: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub features: FeatureSpec,
    pub target_names: Vec<String>,
    /// Per-target maxima used to normalize targets into `(0, 1]`.
    pub target_max: Vec<f64>,
    /// Extra scale for the appended features, one per extra.
    pub extra_scale: Vec<f64>,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    /// One model per target.
    Svr(Vec<SvrModel>),
    Ovk(OvkModel),
    Ffnn(FfnnModel),
}

impl Predictor {
    pub fn tag(&self) -> u8 {
        match self {
            Predictor::Svr(_) => 1,
            Predictor::Ovk(_) => 2,
            Predictor::Ffnn(_) => 3,
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            Predictor::Svr(_) => "svr",
            Predictor::Ovk(_) => "ovk",
            Predictor::Ffnn(_) => "ffnn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub meta: ModelMeta,
    pub predictor: Predictor,
}

/// Layout after the header:
///
/// meta: f64 radius, u32 bins, f64 r_max, f64 epsilon_weight, u32 species,
/// u8 extras, u32 target count with (u32 length + UTF-8) names, f64 list of
/// target maxima, f64 list of extra scales, u64 split seed.
///
/// SVR: u32 model count, each: kernel (u8 kind, f64 γ), f64 λ, f64 ε,
/// f64 list α, inputs (u32 n, u32 dim, n·dim f64).
///
/// OVK: input kernel, output kernel, f64 λ, f64 eps_reg, inputs, targets,
/// then K, L, T, U as (u32 rows, u32 cols, column-major f64).
///
/// FFNN: u32 input dim, u32 output dim, u32 hidden count with u32 widths,
/// f64 list of parameters.
pub fn encode_model(m: &SavedModel) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(MODEL_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(m.predictor.tag());
    let f = &m.meta.features;
    w.f64(f.radius);
    w.len(f.bins);
    w.f64(f.r_max);
    w.f64(f.epsilon_weight);
    w.len(f.species);
    w.u8(f.extras as u8);
    w.len(m.meta.target_names.len());
    m.meta.target_names.iter().for_each(|s| w.string(s));
    w.f64s(&m.meta.target_max);
    w.f64s(&m.meta.extra_scale);
    w.u64(m.meta.split_seed);
    match &m.predictor {
        Predictor::Svr(models) => {
            w.len(models.len());
            for s in models {
                w.kernel(&s.kernel);
                w.f64(s.lambda);
                w.f64(s.epsilon_tube);
                w.f64s(&s.alphas);
                w.rows(&s.training_inputs);
            }
        }
        Predictor::Ovk(o) => {
            w.kernel(&o.input_kernel);
            w.kernel(&o.output_kernel);
            w.f64(o.lambda);
            w.f64(o.eps_reg);
            w.rows(&o.training_inputs);
            w.rows(&o.training_targets);
            for mat in [&o.k_n, &o.l_n, &o.t_n, &o.u] {
                w.mat(mat);
            }
        }
        Predictor::Ffnn(n) => {
            w.len(n.input_dim);
            w.len(n.output_dim);
            w.len(n.hidden.len());
            n.hidden.iter().for_each(|&h| w.len(h));
            w.f64s(&n.params);
        }
    }
    w.buf
}

pub fn decode_model(bytes: &[u8]) -> Result<SavedModel> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let tag = r.u8()?;
    let features = FeatureSpec {
        radius: r.f64()?,
        bins: r.u32()? as usize,
        r_max: r.f64()?,
        epsilon_weight: r.f64()?,
        species: r.u32()? as usize,
        extras: r.u8()? != 0,
    };
    let n_targets = r.len()?;
    let target_names = (0..n_targets).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let target_max = r.f64s()?;
    let extra_scale = r.f64s()?;
    let split_seed = r.u64()?;
    if target_max.len() != n_targets {
        return Err(Error::Format("target maxima do not match target names".into()));
    }
    let predictor = match tag {
        1 => {
            let count = r.len()?;
            let models = (0..count)
                .map(|_| {
                    Ok(SvrModel {
                        kernel: r.kernel()?,
                        lambda: r.f64()?,
                        epsilon_tube: r.f64()?,
                        alphas: r.f64s()?,
                        training_inputs: r.rows()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if models.iter().any(|m| m.alphas.len() != m.training_inputs.len()) {
                return Err(Error::Format("SVR coefficients do not match its inputs".into()));
            }
            Predictor::Svr(models)
        }
        2 => Predictor::Ovk(OvkModel {
            input_kernel: r.kernel()?,
            output_kernel: r.kernel()?,
            lambda: r.f64()?,
            eps_reg: r.f64()?,
            training_inputs: r.rows()?,
            training_targets: r.rows()?,
            k_n: r.mat()?,
            l_n: r.mat()?,
            t_n: r.mat()?,
            u: r.mat()?,
        }),
        3 => {
            let input_dim = r.u32()? as usize;
            let output_dim = r.u32()? as usize;
            let depth = r.len()?;
            let hidden = (0..depth).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
            let params = r.f64s()?;
            let mut m = FfnnModel::zeros(input_dim, &hidden, output_dim).map_err(|e| Error::Format(e.to_string()))?;
            if params.len() != m.params.len() {
                return Err(Error::Format("network parameter count does not match its shape".into()));
            }
            m.params = params;
            Predictor::Ffnn(m)
        }
        t => return Err(Error::Format(format!("unknown method tag {t}"))),
    };
    r.finish()?;
    Ok(SavedModel {
        meta: ModelMeta {
            features,
            target_names,
            target_max,
            extra_scale,
            split_seed,
        },
        predictor,
    })
}

pub fn write_model(path: &Path, m: &SavedModel) -> Result<()> {
    write_atomic(path, &encode_model(m))
}

pub fn read_model(path: &Path) -> Result<SavedModel> {
    decode_model(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub delta: f64,
    pub s: f64,
    pub seed: u64,
    pub converged: bool,
    pub path: String,
}

impl ManifestRow {
    pub fn params(&self) -> GmParams {
        GmParams {
            a: self.a,
            b: self.b,
            c: self.c,
            delta: self.delta,
            s: self.s,
        }
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["id", "a", "b", "c", "delta", "s", "seed", "converged", "path"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

/// One row of the features CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: usize,
    pub radius: f64,
    pub rdh: Vec<f64>,
    pub c_m: Option<f64>,
    pub n_c: Option<usize>,
}

fn feature_header(bins: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "radius".to_string()];
    h.extend((1..=bins).map(|i| format!("bin_{i}")));
    h.push("c_m".into());
    h.push("n_c".into());
    h
}

pub fn write_features(path: &Path, bins: usize, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(feature_header(bins))?;
    for r in rows {
        if r.rdh.len() != bins {
            return Err(Error::shape(bins, r.rdh.len()));
        }
        let mut rec = vec![r.id.to_string(), r.radius.to_string()];
        rec.extend(r.rdh.iter().map(|x| x.to_string()));
        rec.push(r.c_m.map(|x| x.to_string()).unwrap_or_default());
        rec.push(r.n_c.map(|x| x.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let bins = header.len().checked_sub(4).filter(|&b| b >= 1).ok_or_else(|| {
        Error::Format("features CSV needs id, radius, bins, c_m and n_c columns".into())
    })?;
    if header.iter().map(str::to_string).collect::<Vec<_>>() != feature_header(bins) {
        return Err(Error::Format("unexpected features CSV header".into()));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Format(format!("bad {what} value '{s}'")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec[0].parse().map_err(|_| Error::Format(format!("bad id '{}'", &rec[0])))?;
        let radius = num(&rec[1], "radius")?;
        let rdh = (0..bins).map(|i| num(&rec[2 + i], "bin")).collect::<Result<Vec<_>>>()?;
        let c_m = match &rec[2 + bins] {
            "" => None,
            s => Some(num(s, "c_m")?),
        };
        let n_c = match &rec[3 + bins] {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Format(format!("bad n_c '{s}'")))?),
        };
        rows.push(FeatureRow { id, radius, rdh, c_m, n_c });
    }
    Ok(rows)
}
