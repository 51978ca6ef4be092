use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gaintune::analysis::{delta_psnr_report, equivalent_filter, filter_to_pgm, net_bias, psnr, BiasMethod};
use gaintune::checkpoint::{load_checkpoint, save_checkpoint};
use gaintune::config::{fnv1a, RunConfig};
use gaintune::data::{add_gaussian_noise, generate_dataset, ImageGray};
use gaintune::imageio::{load_pgm, load_rawf64, save_pgm, save_rawf64, PgmDepth};
use gaintune::rng::RngStream;
use gaintune::tensor::Tensor;
use gaintune::training::{self, AdaptConfig, AdaptMode};
use gaintune::Error;

use crate::manifest::Manifest;

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. }
            | Error::BadMagic(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::MalformedHeader { .. }
            | Error::UnsupportedPgm(_)
            | Error::ActivationFlip
            | Error::IdenticalImages
            | Error::EmptyMask(_)
            | Error::NonScalarOutput(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn ensure_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn ensure_parent(file: &Path) -> CmdResult {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

/// `out` with `suffix` appended to its file name.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, Failure> {
    let rd = fs::read_dir(dir).map_err(|e| io_fail(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| io_fail(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Noisy input: `.raw` is read losslessly, anything else as PGM.
fn load_image_tensor(path: &Path) -> Result<Tensor<f64>, Failure> {
    if path.extension().is_some_and(|x| x == "raw") {
        let t = load_rawf64(path)?;
        let [n, c, _, _] = t.shape();
        if n != 1 || c != 1 {
            return Err(Failure::validation(format!(
                "{} holds shape {:?}, expected one single-channel image",
                path.display(),
                t.shape()
            )));
        }
        Ok(t)
    } else {
        Ok(load_pgm(path)?.to_tensor())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_fail(p, e))?;
            let cfg = RunConfig::parse(&text).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?;
            cfg.validate()?;
            Ok(cfg)
        }
        None => Ok(RunConfig::default()),
    }
}

pub struct GenRequest<'a> {
    pub count: Option<usize>,
    pub size: Option<usize>,
    pub shapes: Option<&'a str>,
    pub seed: Option<u64>,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn gen_pc(argv: &[String], req: &GenRequest) -> CmdResult {
    let mut cfg = load_config(req.config)?;
    if let Some(shapes) = req.shapes {
        // reuse the config grammar so both spellings agree
        let d = RunConfig::parse(&format!("[data]\nshapes = {shapes}\n"))
            .map_err(|_| Failure::validation(format!("--shapes expects LO..HI, got {shapes:?}")))?;
        (cfg.data.shapes_lo, cfg.data.shapes_hi) = (d.data.shapes_lo, d.data.shapes_hi);
    }
    cfg.data.count = req.count.unwrap_or(cfg.data.count);
    cfg.data.size = req.size.unwrap_or(cfg.data.size);
    cfg.data.seed = req.seed.unwrap_or(cfg.data.seed);
    cfg.validate()?;
    let d = &cfg.data;
    let images = generate_dataset(d.seed, d.count, d.size, d.shapes_lo..=d.shapes_hi)?;
    ensure_dir(req.out)?;
    let mut m = Manifest::new(argv, &cfg.hash());
    m.add("seeds", format!("data={}", d.seed));
    for (i, img) in images.iter().enumerate() {
        let path = req.out.join(format!("pc_{i:04}.pgm"));
        save_pgm(img, &path, cfg.io.pgm_depth)?;
        m.add_path("output", &path);
    }
    write_text(&req.out.join("manifest.txt"), &m.render())
}

pub fn corrupt(argv: &[String], input: &Path, sigma: &str, seed: u64, out: &Path) -> CmdResult {
    let bad = || Failure::validation(format!("--sigma255 expects V or LO..HI with 0 <= LO <= HI, got {sigma:?}"));
    let (lo, hi): (f64, f64) = match sigma.split_once("..") {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let v = sigma.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
        return Err(bad());
    }
    let clean = files_with_ext(input, "pgm")?;
    if clean.is_empty() {
        return Err(Failure::validation(format!("no PGM images in {}", input.display())));
    }
    ensure_dir(out)?;
    let params = format!("sigma255={lo}..{hi} seed={seed}");
    let mut m = Manifest::new(argv, &format!("{:016x}", fnv1a(params.as_bytes())));
    m.add("seeds", format!("noise={seed}"));
    m.add_path("input", input);
    let root = RngStream::new(seed);
    for (i, path) in clean.iter().enumerate() {
        let img = load_pgm(path)?;
        let mut stream = root.fork(i as u64);
        let s255 = if lo == hi { lo } else { stream.uniform_range(lo, hi) };
        let pair = add_gaussian_noise(&img, s255, &mut stream)?;
        let name = stem(path);
        let raw = out.join(format!("{name}.raw"));
        save_rawf64(&pair.noisy, &raw)?;
        let copy = out.join(format!("{name}.pgm"));
        fs::copy(path, &copy).map_err(|e| io_fail(&copy, e))?;
        m.add(&format!("sigma255.{name}"), s255);
        m.add_path("output", &raw);
        m.add_path("output", &copy);
    }
    write_text(&out.join("manifest.txt"), &m.render())
}

pub fn pretrain(argv: &[String], config: Option<&Path>, data: &Path, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let spec = cfg.arch.spec()?;
    let files = files_with_ext(data, "pgm")?;
    if files.is_empty() {
        return Err(Failure::validation(format!("no PGM images in {}", data.display())));
    }
    let images = files.iter().map(load_pgm).collect::<Result<Vec<_>, _>>()?;
    let (ckpt, log) = training::pretrain(&spec, &images, &cfg.pretrain)?;
    ensure_parent(out)?;
    save_checkpoint(&ckpt, out)?;
    write_text(&sidecar(out, ".log.csv"), &log.to_csv())?;
    write_text(&sidecar(out, ".config.txt"), &cfg.to_text())?;
    let mut m = Manifest::new(argv, &cfg.hash());
    m.add("seeds", format!("pretrain={}", cfg.pretrain.seed));
    m.add_path("input", data);
    m.add_path("output", out);
    write_text(&sidecar(out, ".manifest.txt"), &m.render())
}

pub struct AdaptRequest<'a> {
    pub ckpt: &'a Path,
    pub noisy: &'a Path,
    pub loss: Option<&'a str>,
    pub mode: Option<&'a str>,
    pub sigma255: Option<f64>,
    pub config: Option<&'a Path>,
    pub clean: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn adapt(argv: &[String], req: &AdaptRequest) -> CmdResult {
    let mut cfg = load_config(req.config)?;
    let mode = req.mode.map(str::parse::<AdaptMode>).transpose()?;
    if req.config.is_none() && mode == Some(AdaptMode::AllParams) {
        cfg.adapt = AdaptConfig::finetune_default();
    }
    if let Some(mode) = mode {
        cfg.adapt.mode = mode;
    }
    if let Some(loss) = req.loss {
        cfg.adapt.loss = loss.parse()?;
    }
    if req.sigma255.is_some() {
        cfg.adapt.sigma255 = req.sigma255;
    }
    cfg.adapt.validate()?;
    let ckpt = load_checkpoint(req.ckpt)?;
    let noisy = load_image_tensor(req.noisy)?;
    let clean = req.clean.map(load_pgm).transpose()?;
    let (adapted, log) = training::adapt(&ckpt, &noisy, &cfg.adapt, clean.as_ref())?;
    ensure_parent(req.out)?;
    save_checkpoint(&adapted, req.out)?;
    write_text(&sidecar(req.out, ".log.csv"), &log.to_csv())?;
    write_text(&sidecar(req.out, ".config.txt"), &cfg.to_text())?;
    let mut m = Manifest::new(argv, &cfg.hash());
    m.add("seeds", format!("adapt={}", cfg.adapt.seed));
    m.add_path("input", req.ckpt);
    m.add_path("input", req.noisy);
    m.add_path("output", req.out);
    write_text(&sidecar(req.out, ".manifest.txt"), &m.render())
}

pub fn denoise(argv: &[String], ckpt: &Path, noisy: &Path, out: &Path, out_raw: Option<&Path>) -> CmdResult {
    let ck = load_checkpoint(ckpt)?;
    let y = load_image_tensor(noisy)?;
    let est = training::denoise_raw(&ck.network, &y)?;
    ensure_parent(out)?;
    save_pgm(&ImageGray::from_tensor_clamped(&est), out, PgmDepth::Eight)?;
    let mut m = Manifest::new(argv, "none");
    m.add_path("input", ckpt);
    m.add_path("input", noisy);
    m.add_path("output", out);
    if let Some(raw) = out_raw {
        ensure_parent(raw)?;
        save_rawf64(&est, raw)?;
        m.add_path("output", raw);
    }
    write_text(&sidecar(out, ".manifest.txt"), &m.render())
}

/// Stem to file, preferring lossless `.raw` over `.pgm`.
fn estimates_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let mut map = BTreeMap::new();
    for p in files_with_ext(dir, "pgm")? {
        map.insert(stem(&p), p);
    }
    for p in files_with_ext(dir, "raw")? {
        map.insert(stem(&p), p);
    }
    Ok(map)
}

fn load_estimate(path: &Path) -> Result<ImageGray, Failure> {
    Ok(ImageGray::from_tensor_clamped(&load_image_tensor(path)?))
}

pub fn eval(argv: &[String], clean: &Path, estimates: &Path, baseline: &Path, out: &Path) -> CmdResult {
    let refs: BTreeMap<String, PathBuf> = files_with_ext(clean, "pgm")?.into_iter().map(|p| (stem(&p), p)).collect();
    let est = estimates_by_stem(estimates)?;
    let base = estimates_by_stem(baseline)?;
    let mut unmatched = Vec::new();
    for s in refs.keys() {
        if !est.contains_key(s) || !base.contains_key(s) {
            unmatched.push(s.clone());
        }
    }
    for s in est.keys().chain(base.keys()) {
        if !refs.contains_key(s) && !unmatched.contains(s) {
            unmatched.push(s.clone());
        }
    }
    if refs.is_empty() {
        return Err(Failure::validation(format!("no clean PGM images in {}", clean.display())));
    }
    if !unmatched.is_empty() {
        return Err(Failure::validation(format!("unmatched stems: {}", unmatched.join(", "))));
    }
    let mut rows = Vec::new();
    for (s, rp) in &refs {
        let reference = load_pgm(rp)?;
        let before = psnr(&reference, &load_estimate(&base[s])?, 1.0)?;
        let after = psnr(&reference, &load_estimate(&est[s])?, 1.0)?;
        rows.push((s.clone(), before, after));
    }
    let report = delta_psnr_report(&rows)?;
    ensure_parent(out)?;
    write_text(out, &report.csv)?;
    println!("{}", report.summary.to_text());
    let mut m = Manifest::new(argv, "none");
    m.add_path("input", clean);
    m.add_path("input", estimates);
    m.add_path("input", baseline);
    m.add_path("output", out);
    write_text(&sidecar(out, ".manifest.txt"), &m.render())
}

pub fn analyze_filter(argv: &[String], ckpt: &Path, noisy: &Path, pixel: &str, out: &Path) -> CmdResult {
    let bad = || Failure::validation(format!("--pixel expects ROW,COL, got {pixel:?}"));
    let (r, c) = pixel.split_once(',').ok_or_else(bad)?;
    let (r, c): (usize, usize) = (r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?);
    let ck = load_checkpoint(ckpt)?;
    let y = load_image_tensor(noisy)?;
    let filter = equivalent_filter(&ck.network, &y, (r, c))?;
    ensure_parent(out)?;
    filter_to_pgm(&filter, out)?;
    println!("row_sum={:.6}", filter.row_sum());
    let mut m = Manifest::new(argv, "none");
    m.add_path("input", ckpt);
    m.add_path("input", noisy);
    m.add_path("output", out);
    write_text(&sidecar(out, ".manifest.txt"), &m.render())
}

pub fn analyze_bias(ckpt: &Path, noisy: &Path, method: &str) -> CmdResult {
    let method: BiasMethod = method.parse()?;
    let ck = load_checkpoint(ckpt)?;
    let y = load_image_tensor(noisy)?;
    let b = net_bias(&ck.network, &y, method, true)?;
    if b.method != method {
        eprintln!("activation pattern changed along the probe; used the full Jacobian");
    }
    println!("bias_l2={:e} relative={:e}", b.bias_l2, b.relative);
    Ok(())
}
