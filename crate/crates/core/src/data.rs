//! Synthetic multi-domain nuclei data plus the on-disk dataset layout.
//!
//! Each domain is described by a [`DomainSpec`]: elliptical nuclei with
//! domain-specific count/size/eccentricity ranges and color statistics are
//! rasterized onto a tinted background, with Gaussian texture noise on top.
//! Pixel values are quantized to 8-bit steps at generation time so the PNG
//! round trip is exact. Generation is deterministic in (spec, seed) with
//! per-image derived streams.
//!
//! On disk a dataset is a directory with a versioned `manifest.txt`, an
//! `images/` folder of RGB8 PNGs and an `instances/` folder of 16-bit
//! grayscale PNGs; the manifest maps sample id -> split -> files -> domain.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, InstanceLabelMap};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::types::DomainRegistry;

pub const MANIFEST_VERSION: &str = "# nuseg-dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// Inclusive nucleus count range per image.
    pub count: (usize, usize),
    /// Semi-major axis range in pixels.
    pub radius: (f64, f64),
    /// Axis ratio range, >= 1.
    pub eccentricity: (f64, f64),
    pub fg: ColorStats,
    pub bg: ColorStats,
    /// Per-pixel Gaussian noise amplitude.
    pub texture_noise: f64,
    pub allow_overlap: bool,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Validation("domain spec needs a name".into()));
        }
        if self.count.0 < 1 || self.count.0 > self.count.1 {
            return Err(Error::Validation(format!(
                "{}: bad count range {:?}",
                self.name, self.count
            )));
        }
        if self.radius.0 < 2.0 || self.radius.0 > self.radius.1 {
            return Err(Error::Validation(format!(
                "{}: radii must be >= 2px and ordered, got {:?}",
                self.name, self.radius
            )));
        }
        if self.eccentricity.0 < 1.0 || self.eccentricity.0 > self.eccentricity.1 {
            return Err(Error::Validation(format!(
                "{}: eccentricity must be >= 1 and ordered, got {:?}",
                self.name, self.eccentricity
            )));
        }
        if self.texture_noise < 0.0 {
            return Err(Error::Validation(format!(
                "{}: negative texture noise",
                self.name
            )));
        }
        Ok(())
    }
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: String::new(),
            count: (3, 6),
            radius: (6.0, 12.0),
            eccentricity: (1.0, 1.6),
            fg: ColorStats {
                mean: [0.78, 0.55, 0.75],
                std: 0.03,
            },
            bg: ColorStats {
                mean: [0.12, 0.10, 0.16],
                std: 0.02,
            },
            texture_noise: 0.03,
            allow_overlap: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split tag `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub domain_id: usize,
    pub split: Split,
    /// [3, H, W] in [0,1], quantized to 8-bit steps.
    pub image: Tensor,
    pub instances: InstanceLabelMap,
}

impl Sample {
    pub fn semantic(&self) -> BinaryMask {
        self.instances.to_binary()
    }

    /// Pixel-level 0/1 ground truth as a tensor.
    pub fn semantic_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.instances.h, self.instances.w],
            self.instances
                .labels
                .iter()
                .map(|&l| f64::from(l > 0))
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub domain_id: usize,
    pub domain_name: String,
    pub provenance: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    pub images_per_domain: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Fraction of images tagged as the test split.
    pub test_fraction: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            images_per_domain: 16,
            image_size: 128,
            seed: 42,
            test_fraction: 0.25,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Placement {
    pixels: Vec<usize>,
}

fn rasterize_ellipse(
    size: usize,
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
) -> Placement {
    let (sin, cos) = theta.sin_cos();
    let r = a.max(b).ceil() as i64 + 1;
    let mut pixels = Vec::new();
    for y in (cy as i64 - r).max(0)..=(cy as i64 + r).min(size as i64 - 1) {
        for x in (cx as i64 - r).max(0)..=(cx as i64 + r).min(size as i64 - 1) {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                pixels.push(y as usize * size + x as usize);
            }
        }
    }
    Placement { pixels }
}

/// Does placing `candidate` keep every already-painted instance nonempty and
/// connected? Used in overlap mode, where later nuclei occlude earlier ones.
fn occlusion_ok(labels: &[u32], size: usize, candidate: &Placement) -> bool {
    let mut affected: Vec<u32> = candidate
        .pixels
        .iter()
        .map(|&p| labels[p])
        .filter(|&l| l > 0)
        .collect();
    affected.sort_unstable();
    affected.dedup();
    if affected.is_empty() {
        return true;
    }
    let mut tentative = labels.to_vec();
    for &p in &candidate.pixels {
        tentative[p] = u32::MAX; // occluder marker
    }
    for l in affected {
        let remaining: Vec<usize> = (0..tentative.len())
            .filter(|&p| tentative[p] == l)
            .collect();
        if remaining.is_empty() {
            return false;
        }
        // BFS over the remaining pixels of this label (8-connectivity)
        let mut seen = vec![false; tentative.len()];
        let mut stack = vec![remaining[0]];
        seen[remaining[0]] = true;
        let mut reached = 1;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / size, p % size);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= size as i64 || nx >= size as i64 {
                        continue;
                    }
                    let np = ny as usize * size + nx as usize;
                    if !seen[np] && tentative[np] == l {
                        seen[np] = true;
                        reached += 1;
                        stack.push(np);
                    }
                }
            }
        }
        if reached != remaining.len() {
            return false;
        }
    }
    true
}

/// Any candidate pixel labeled or 8-adjacent to a labeled pixel? Used in
/// no-overlap mode; the one-pixel gap keeps instances separable components.
fn touches_existing(labels: &[u32], size: usize, candidate: &Placement) -> bool {
    for &p in &candidate.pixels {
        let (y, x) = (p / size, p % size);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= size as i64 || nx >= size as i64 {
                    continue;
                }
                if labels[ny as usize * size + nx as usize] > 0 {
                    return true;
                }
            }
        }
    }
    false
}

const PLACEMENT_RETRIES: usize = 200;

fn generate_image(
    spec: &DomainSpec,
    size: usize,
    rng: &mut Rng,
) -> Result<(Tensor, InstanceLabelMap)> {
    let n = rng.range_inclusive(spec.count.0, spec.count.1);
    let mut labels = vec![0u32; size * size];
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(n);

    for j in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let a = rng.uniform(spec.radius.0, spec.radius.1);
            let ecc = rng.uniform(spec.eccentricity.0, spec.eccentricity.1);
            let b = a / ecc;
            let theta = rng.uniform(0.0, std::f64::consts::PI);
            let margin = a + 1.0;
            if 2.0 * margin >= size as f64 {
                return Err(Error::Generation(format!(
                    "{}: radius {a:.1} too large for {size}px images",
                    spec.name
                )));
            }
            let cy = rng.uniform(margin, size as f64 - margin);
            let cx = rng.uniform(margin, size as f64 - margin);
            let cand = rasterize_ellipse(size, cy, cx, a, b, theta);
            if cand.pixels.is_empty() {
                continue;
            }
            let ok = if spec.allow_overlap {
                occlusion_ok(&labels, size, &cand)
            } else {
                !touches_existing(&labels, size, &cand)
            };
            if !ok {
                continue;
            }
            for &p in &cand.pixels {
                labels[p] = (j + 1) as u32;
            }
            let mut color = [0.0; 3];
            for (c, m) in color.iter_mut().zip(spec.fg.mean) {
                *c = m + spec.fg.std * rng.normal();
            }
            colors.push(color);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "{}: could not place nucleus {} of {n} after {PLACEMENT_RETRIES} tries",
                spec.name,
                j + 1
            )));
        }
    }

    let mut bg = [0.0; 3];
    for (c, m) in bg.iter_mut().zip(spec.bg.mean) {
        *c = m + spec.bg.std * rng.normal();
    }
    let mut image = Tensor::zeros(vec![3, size, size]);
    for p in 0..size * size {
        let base = if labels[p] > 0 {
            colors[labels[p] as usize - 1]
        } else {
            bg
        };
        for (ch, b) in base.iter().enumerate() {
            image.data_mut()[ch * size * size + p] =
                quantize(b + spec.texture_noise * rng.normal());
        }
    }
    Ok((image, InstanceLabelMap::new(size, size, labels)))
}

/// Generate one domain's dataset; deterministic in (spec, seed, domain_id).
pub fn generate_domain(
    spec: &DomainSpec,
    opts: &GenOptions,
    domain_id: usize,
) -> Result<Dataset> {
    spec.validate()?;
    if opts.images_per_domain == 0 {
        return Err(Error::Validation("images_per_domain must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&opts.test_fraction) {
        return Err(Error::Validation("test_fraction outside [0, 1]".into()));
    }
    let domain_stream = Rng::new(opts.seed).derive(0x5EED).derive(domain_id as u64);

    // deterministic split assignment
    let n = opts.images_per_domain;
    let n_test = ((n as f64) * opts.test_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = domain_stream.derive(0x51);
    split_rng.shuffle(&mut order);
    let mut splits = vec![Split::Train; n];
    for &i in order.iter().take(n_test) {
        splits[i] = Split::Test;
    }

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = domain_stream.derive(0x100 + i as u64);
        let (image, instances) = generate_image(spec, opts.image_size, &mut rng)?;
        samples.push(Sample {
            id: format!("img_{i:04}"),
            domain_id,
            split: splits[i],
            image,
            instances,
        });
    }
    Ok(Dataset {
        domain_id,
        domain_name: spec.name.clone(),
        provenance: format!(
            "spec={} seed={} size={} images={}",
            spec.name, opts.seed, opts.image_size, n
        ),
        samples,
    })
}

/// Build the registry and one dataset per spec, ids in list order.
pub fn make_registry(
    specs: &[DomainSpec],
    opts: &GenOptions,
) -> Result<(DomainRegistry, Vec<Dataset>)> {
    let registry = DomainRegistry::new(specs.iter().map(|s| s.name.clone()).collect())?;
    let datasets: Result<Vec<Dataset>> = specs
        .iter()
        .enumerate()
        .map(|(k, spec)| generate_domain(spec, opts, k))
        .collect();
    Ok((registry, datasets?))
}

// ---- disk layout ----

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("instances"))?;
    let mut manifest = format!(
        "{MANIFEST_VERSION}\n# domain: {} {}\n# provenance: {}\n",
        ds.domain_id, ds.domain_name, ds.provenance
    );
    for s in &ds.samples {
        let (h, w) = (s.instances.h, s.instances.w);
        if s.instances.n_instances() > u16::MAX as usize {
            return Err(Error::Validation(format!(
                "{}: more instances than a 16-bit label image can hold",
                s.id
            )));
        }
        let mut rgb = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (s.image.data()[y * w + x] * 255.0).round() as u8,
                    (s.image.data()[h * w + y * w + x] * 255.0).round() as u8,
                    (s.image.data()[2 * h * w + y * w + x] * 255.0).round() as u8,
                ];
                rgb.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        let img_rel = format!("images/{}.png", s.id);
        rgb.save(dir.join(&img_rel))?;

        let mut lab: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                lab.put_pixel(
                    x as u32,
                    y as u32,
                    Luma([s.instances.labels[y * w + x] as u16]),
                );
            }
        }
        let lab_rel = format!("instances/{}.png", s.id);
        lab.save(dir.join(&lab_rel))?;

        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.id,
            s.split.as_str(),
            img_rel,
            lab_rel,
            s.domain_id
        ));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Err(Error::Format(format!(
            "missing manifest at {}",
            manifest_path.display()
        )));
    }
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first.trim() == MANIFEST_VERSION => {}
        other => {
            return Err(Error::Format(format!(
                "unsupported manifest header {other:?}, expected `{MANIFEST_VERSION}`"
            )))
        }
    }
    let mut domain_id = 0usize;
    let mut domain_name = String::from("unknown");
    let mut provenance = String::new();
    let mut samples = Vec::new();
    for line in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# domain: ") {
            let mut parts = rest.splitn(2, ' ');
            domain_id = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Format("bad `# domain:` header".into()))?;
            domain_name = parts.next().unwrap_or("unknown").to_string();
            continue;
        }
        if let Some(rest) = line.strip_prefix("# provenance: ") {
            provenance = rest.to_string();
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "manifest line needs 5 tab-separated fields: `{line}`"
            )));
        }
        let id = fields[0].to_string();
        let split = Split::parse(fields[1])?;
        let img_path = dir.join(fields[2]);
        let lab_path = dir.join(fields[3]);
        let sample_domain: usize = fields[4]
            .parse()
            .map_err(|_| Error::Format(format!("bad domain id in `{line}`")))?;
        if !img_path.exists() || !lab_path.exists() {
            return Err(Error::Format(format!(
                "manifest lists missing file for sample `{id}`"
            )));
        }
        let rgb = image::open(&img_path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let lab16 = load_label_png(&lab_path)?;
        if lab16.dimensions() != (w, h) {
            return Err(Error::Validation(format!(
                "{id}: image {w}x{h} but instance map {}x{}",
                lab16.width(),
                lab16.height()
            )));
        }
        let (h, w) = (h as usize, w as usize);
        let mut image_t = Tensor::zeros(vec![3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let px = rgb.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    image_t.data_mut()[ch * h * w + y * w + x] = px[ch] as f64 / 255.0;
                }
            }
        }
        let mut labels = vec![0u32; h * w];
        for y in 0..h {
            for x in 0..w {
                labels[y * w + x] = lab16.get_pixel(x as u32, y as u32)[0] as u32;
            }
        }
        let instances = InstanceLabelMap::new(h, w, labels);
        check_contiguous(&id, &instances)?;
        samples.push(Sample {
            id,
            domain_id: sample_domain,
            split,
            image: image_t,
            instances,
        });
    }
    Ok(Dataset {
        domain_id,
        domain_name,
        provenance,
        samples,
    })
}

fn load_label_png(path: &Path) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
    let img = image::open(path)?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => Ok(buf),
        other => {
            // accept 8-bit label maps from external tooling
            let gray: GrayImage = other.to_luma8();
            let (w, h) = gray.dimensions();
            let mut out: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w, h);
            for (x, y, p) in gray.enumerate_pixels() {
                out.put_pixel(x, y, Luma([p[0] as u16]));
            }
            Ok(out)
        }
    }
}

fn check_contiguous(id: &str, map: &InstanceLabelMap) -> Result<()> {
    let n = map.n_instances();
    let mut seen = vec![false; n + 1];
    for &l in &map.labels {
        seen[l as usize] = true;
    }
    for l in 1..=n {
        if !seen[l] {
            return Err(Error::Validation(format!(
                "{id}: instance labels not contiguous, {l} missing below max {n}"
            )));
        }
    }
    Ok(())
}

/// Load every per-domain dataset directory under `root`, ordered by domain id.
pub fn load_all_domains(root: &Path) -> Result<(DomainRegistry, Vec<Dataset>)> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest.txt").exists())
        .collect();
    if dirs.is_empty() {
        return Err(Error::Format(format!(
            "no dataset directories with manifests under {}",
            root.display()
        )));
    }
    dirs.sort();
    let mut datasets: Vec<Dataset> = dirs.iter().map(|d| load_dataset(d)).collect::<Result<_>>()?;
    datasets.sort_by_key(|d| d.domain_id);
    for (k, ds) in datasets.iter().enumerate() {
        if ds.domain_id != k {
            return Err(Error::Format(format!(
                "domain ids not contiguous: found {} at position {k}",
                ds.domain_id
            )));
        }
    }
    let registry = DomainRegistry::new(datasets.iter().map(|d| d.domain_name.clone()).collect())?;
    Ok((registry, datasets))
}

// ---- spec file parsing ----

/// Parse a domain-spec file: one `[domain]` section per domain, `key: value`
/// lines inside (see `config/specs.example`).
pub fn parse_specs(text: &str) -> Result<Vec<DomainSpec>> {
    let mut specs: Vec<DomainSpec> = Vec::new();
    let mut current: Option<DomainSpec> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "[domain]" {
            if let Some(spec) = current.take() {
                spec.validate()?;
                specs.push(spec);
            }
            current = Some(DomainSpec::default());
            continue;
        }
        let Some(spec) = current.as_mut() else {
            return Err(Error::Config(format!(
                "line {}: key outside a [domain] section",
                lineno + 1
            )));
        };
        let Some((key, value)) = line.split_once(':') else {
            return Err(Error::Config(format!(
                "line {}: expected `key: value`",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        let bad = |key: &str, value: &str| {
            Error::Config(format!("{key}: cannot parse value `{value}`"))
        };
        match key {
            "name" => spec.name = value.to_string(),
            "count" => spec.count = parse_range_usize(value).ok_or_else(|| bad(key, value))?,
            "radius" => spec.radius = parse_range_f64(value).ok_or_else(|| bad(key, value))?,
            "eccentricity" => {
                spec.eccentricity = parse_range_f64(value).ok_or_else(|| bad(key, value))?
            }
            "fg_color" => spec.fg.mean = parse_rgb(value).ok_or_else(|| bad(key, value))?,
            "fg_color_std" => spec.fg.std = value.parse().map_err(|_| bad(key, value))?,
            "bg_color" => spec.bg.mean = parse_rgb(value).ok_or_else(|| bad(key, value))?,
            "bg_color_std" => spec.bg.std = value.parse().map_err(|_| bad(key, value))?,
            "texture_noise" => spec.texture_noise = value.parse().map_err(|_| bad(key, value))?,
            "allow_overlap" => {
                spec.allow_overlap = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad(key, value)),
                }
            }
            _ => return Err(Error::Config(format!("unknown spec key `{key}`"))),
        }
    }
    if let Some(spec) = current.take() {
        spec.validate()?;
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(Error::Config("spec file defines no [domain] sections".into()));
    }
    Ok(specs)
}

fn parse_range_f64(s: &str) -> Option<(f64, f64)> {
    let (a, b) = s.split_once("..")?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_range_usize(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once("..")?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_rgb(s: &str) -> Option<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return None;
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().ok()?;
    }
    Some(out)
}
