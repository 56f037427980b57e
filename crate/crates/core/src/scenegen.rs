//! Procedural generation of labeled synthetic scenes, the binary scene file
//! format, and colored PLY export.
//!
//! Scene file layout (all little-endian):
//!   magic "SEG3DSCN" | u16 version | u64 N | u32 num_classes | u8 flags
//!   then N records of: 3x f64 position, 3x f64 color,
//!   i32 semantic_id (if flags bit 0), i32 instance_id (if flags bit 1).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, NO_INSTANCE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Box,
    Cylinder,
    Sphere,
    LShape,
}

/// Parameters for procedural scene generation. Semantic classes are the
/// palette entries (class i = palette[i]) plus a floor/background class with
/// id palette.len(); instances only ever use palette classes.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    /// Scene footprint in meters (square ground plane).
    pub extent: f64,
    pub palette: Vec<PrimitiveKind>,
    /// Inclusive instance count range.
    pub instance_count: (usize, usize),
    /// Inclusive surface-sample count range per instance.
    pub points_per_instance: (usize, usize),
    /// Floor points per square meter.
    pub floor_density: f64,
    /// Stddev of Gaussian RGB jitter.
    pub color_noise: f64,
    /// Probability of corrupting a point's semantic label.
    pub label_noise: f64,
}

impl SceneSpec {
    /// Total semantic classes including the floor class.
    pub fn num_classes(&self) -> usize {
        self.palette.len() + 1
    }

    pub fn floor_class(&self) -> i32 {
        self.palette.len() as i32
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent <= 0.0 {
            return Err(Error::Config("scene extent must be positive".into()));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("class palette must be nonempty".into()));
        }
        if self.instance_count.0 > self.instance_count.1 {
            return Err(Error::Config("instance count range is empty".into()));
        }
        if self.points_per_instance.0 > self.points_per_instance.1
            || self.points_per_instance.0 < 30
        {
            return Err(Error::Config(
                "points per instance range must be nonempty with lower bound >= 30".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent: 6.0,
            palette: vec![PrimitiveKind::Box, PrimitiveKind::Cylinder, PrimitiveKind::Sphere],
            instance_count: (3, 6),
            points_per_instance: (150, 400),
            floor_density: 24.0,
            color_noise: 0.03,
            label_noise: 0.0,
        }
    }
}

fn class_base_color(class: usize, num_classes: usize) -> [f64; 3] {
    if class + 1 == num_classes {
        return [0.55, 0.55, 0.55]; // floor
    }
    // well-separated hues
    let hue = class as f64 / (num_classes - 1) as f64;
    hsv_to_rgb(hue, 0.8, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor() as i64 % 6;
    let f = h * 6.0 - (h * 6.0).floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Placement {
    center: [f64; 3],
    radius: f64,
    size: [f64; 3],
}

/// Sample one point uniformly by area on the surface of a primitive centered
/// at the origin (resting height handled by the caller).
fn sample_surface(kind: PrimitiveKind, size: &[f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    match kind {
        PrimitiveKind::Box => sample_box_surface(size[0], size[1], size[2], rng),
        PrimitiveKind::Cylinder => {
            let r = size[0] * 0.5;
            let h = size[2];
            let lateral = 2.0 * std::f64::consts::PI * r * h;
            let cap = std::f64::consts::PI * r * r;
            let u = rng.gen_range(0.0..lateral + 2.0 * cap);
            if u < lateral {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                [r * theta.cos(), r * theta.sin(), rng.gen_range(-h / 2.0..h / 2.0)]
            } else {
                let z = if u < lateral + cap { -h / 2.0 } else { h / 2.0 };
                // uniform on disc
                let rr = r * rng.gen_range(0.0f64..1.0).sqrt();
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                [rr * theta.cos(), rr * theta.sin(), z]
            }
        }
        PrimitiveKind::Sphere => {
            let r = size[0] * 0.5;
            let normal: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
            loop {
                let v = [
                    normal.sample(rng),
                    normal.sample(rng),
                    normal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-9 {
                    return [v[0] / n * r, v[1] / n * r, v[2] / n * r];
                }
            }
        }
        PrimitiveKind::LShape => {
            // two boxes: a base slab plus an upright on one end
            let (dx, dy, dz) = (size[0], size[1], size[2]);
            let base = [dx, dy, dz * 0.4];
            let upright = [dx * 0.4, dy, dz];
            let area = |s: &[f64; 3]| 2.0 * (s[0] * s[1] + s[0] * s[2] + s[1] * s[2]);
            if rng.gen_range(0.0..area(&base) + area(&upright)) < area(&base) {
                let p = sample_box_surface(base[0], base[1], base[2], rng);
                [p[0], p[1], p[2] - dz * 0.3]
            } else {
                let p = sample_box_surface(upright[0], upright[1], upright[2], rng);
                [p[0] - dx * 0.3, p[1], p[2]]
            }
        }
    }
}

fn sample_box_surface(dx: f64, dy: f64, dz: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let ax = dy * dz; // x-normal faces
    let ay = dx * dz;
    let az = dx * dy;
    let u = rng.gen_range(0.0..2.0 * (ax + ay + az));
    let (hx, hy, hz) = (dx / 2.0, dy / 2.0, dz / 2.0);
    let sign = |even: bool| if even { 1.0 } else { -1.0 };
    if u < 2.0 * ax {
        let s = sign(u < ax);
        [s * hx, rng.gen_range(-hy..hy), rng.gen_range(-hz..hz)]
    } else if u < 2.0 * (ax + ay) {
        let s = sign(u < 2.0 * ax + ay);
        [rng.gen_range(-hx..hx), s * hy, rng.gen_range(-hz..hz)]
    } else {
        let s = sign(u < 2.0 * (ax + ay) + az);
        [rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), s * hz]
    }
}

/// Generate a labeled scene, deterministic for a given (spec, seed).
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = spec.num_classes();

    let count = rng.gen_range(spec.instance_count.0..=spec.instance_count.1);
    let mut classes: Vec<usize> = (0..count)
        .map(|_| rng.gen_range(0..spec.palette.len()))
        .collect();
    if count >= 2 {
        // guarantee at least one same-class pair to exercise instance separation
        classes[1] = classes[0];
    }

    // place instances with bounded retries against overlap
    let mut placements: Vec<Placement> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for attempt in 0..128 {
            // shrink the footprint as retries accumulate so dense scenes
            // still pack
            let shrink = 1.0 - 0.4 * (attempt as f64 / 127.0);
            let size: [f64; 3] = [
                rng.gen_range(0.5..1.2) * shrink,
                rng.gen_range(0.5..1.2) * shrink,
                rng.gen_range(0.6..1.4),
            ];
            // xy footprint half-extent; l-shapes overhang by up to 0.3*dx
            let radius = 0.5 * size[0].max(size[1]) + 0.3 * size[0];
            let margin = radius + 0.2;
            if 2.0 * margin >= spec.extent {
                continue;
            }
            let center = [
                rng.gen_range(margin..spec.extent - margin),
                rng.gen_range(margin..spec.extent - margin),
                size[2] * 0.5,
            ];
            let ok = placements.iter().all(|p| {
                let dx = p.center[0] - center[0];
                let dy = p.center[1] - center[1];
                (dx * dx + dy * dy).sqrt() > p.radius + radius + 0.15
            });
            if ok {
                placements.push(Placement { center, radius, size });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {} instances in a {}m scene",
                count, spec.extent
            )));
        }
    }

    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    let noise = Normal::new(0.0, spec.color_noise.max(1e-12)).unwrap();

    for (inst_id, (placement, &class)) in placements.iter().zip(&classes).enumerate() {
        let n_points = rng.gen_range(spec.points_per_instance.0..=spec.points_per_instance.1);
        let base = class_base_color(class, num_classes);
        let kind = spec.palette[class];
        for _ in 0..n_points {
            let local = sample_surface(kind, &placement.size, &mut rng);
            positions.push([
                placement.center[0] + local[0],
                placement.center[1] + local[1],
                (placement.center[2] + local[2]).max(0.0),
            ]);
            let mut c = base;
            for ch in c.iter_mut() {
                *ch = (*ch + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            colors.push(c);
            semantic.push(class as i32);
            instance.push(inst_id as i32);
        }
    }

    // floor
    let floor_points = (spec.extent * spec.extent * spec.floor_density).ceil() as usize;
    let floor_base = class_base_color(num_classes - 1, num_classes);
    for _ in 0..floor_points {
        positions.push([
            rng.gen_range(0.0..spec.extent),
            rng.gen_range(0.0..spec.extent),
            0.0,
        ]);
        let mut c = floor_base;
        for ch in c.iter_mut() {
            *ch = (*ch + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        colors.push(c);
        semantic.push(spec.floor_class());
        instance.push(NO_INSTANCE);
    }

    if spec.label_noise > 0.0 {
        for s in semantic.iter_mut() {
            if rng.gen_bool(spec.label_noise) {
                *s = rng.gen_range(0..num_classes) as i32;
            }
        }
    }

    let cloud = PointCloud {
        positions,
        colors,
        semantic_id: Some(semantic),
        instance_id: Some(instance),
    };
    if spec.label_noise == 0.0 {
        // label noise deliberately breaks instance->class consistency
        cloud.validate(num_classes)?;
    }
    Ok(cloud)
}

// -- scene file I/O -----------------------------------------------------------

const SCENE_MAGIC: &[u8; 8] = b"SEG3DSCN";
const SCENE_VERSION: u16 = 1;

pub fn save_scene(cloud: &PointCloud, num_classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    write_scene(cloud, num_classes, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn write_scene(
    cloud: &PointCloud,
    num_classes: usize,
    w: &mut impl Write,
) -> std::io::Result<()> {
    w.write_all(SCENE_MAGIC)?;
    w.write_all(&SCENE_VERSION.to_le_bytes())?;
    w.write_all(&(cloud.len() as u64).to_le_bytes())?;
    w.write_all(&(num_classes as u32).to_le_bytes())?;
    let flags: u8 = (cloud.semantic_id.is_some() as u8) | ((cloud.instance_id.is_some() as u8) << 1);
    w.write_all(&[flags])?;
    for i in 0..cloud.len() {
        for &v in &cloud.positions[i] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &cloud.colors[i] {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(s) = &cloud.semantic_id {
            w.write_all(&s[i].to_le_bytes())?;
        }
        if let Some(s) = &cloud.instance_id {
            w.write_all(&s[i].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a scene file; returns the cloud and its class count.
pub fn load_scene(path: impl AsRef<Path>) -> Result<(PointCloud, usize)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_scene(&mut BufReader::new(f))
}

pub fn read_scene(r: &mut impl Read) -> Result<(PointCloud, usize)> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated scene file: {}", e));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != SCENE_MAGIC {
        return Err(Error::Format("not a scene file (bad magic)".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(fmt)?;
    let version = u16::from_le_bytes(b2);
    if version != SCENE_VERSION {
        return Err(Error::Format(format!(
            "scene file version mismatch: found {}, expected {}",
            version, SCENE_VERSION
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(fmt)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(fmt)?;
    let num_classes = u32::from_le_bytes(b4) as usize;
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(fmt)?;
    let has_semantic = b1[0] & 1 != 0;
    let has_instance = b1[0] & 2 != 0;

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut semantic = if has_semantic { Some(Vec::with_capacity(n)) } else { None };
    let mut instance = if has_instance { Some(Vec::with_capacity(n)) } else { None };
    let read_f64 = |r: &mut dyn Read| -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    let read_i32 = |r: &mut dyn Read| -> std::io::Result<i32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(i32::from_le_bytes(b))
    };
    for _ in 0..n {
        positions.push([
            read_f64(r).map_err(fmt)?,
            read_f64(r).map_err(fmt)?,
            read_f64(r).map_err(fmt)?,
        ]);
        colors.push([
            read_f64(r).map_err(fmt)?,
            read_f64(r).map_err(fmt)?,
            read_f64(r).map_err(fmt)?,
        ]);
        if let Some(s) = semantic.as_mut() {
            s.push(read_i32(r).map_err(fmt)?);
        }
        if let Some(s) = instance.as_mut() {
            s.push(read_i32(r).map_err(fmt)?);
        }
    }
    Ok((
        PointCloud { positions, colors, semantic_id: semantic, instance_id: instance },
        num_classes,
    ))
}

// -- PLY export ---------------------------------------------------------------

/// Deterministic palette color for instance i (golden-angle hue walk).
pub fn instance_color(i: usize) -> [u8; 3] {
    let hue = (i as f64 * 0.618_033_988_749_895).fract();
    let rgb = hsv_to_rgb(hue, 0.85, 0.95);
    [
        (rgb[0] * 255.0).round() as u8,
        (rgb[1] * 255.0).round() as u8,
        (rgb[2] * 255.0).round() as u8,
    ]
}

const UNASSIGNED_GRAY: [u8; 3] = [128, 128, 128];

/// Write an ASCII PLY coloring each point by its instance; points in no
/// instance are gray. `instances` lists point indices per instance.
pub fn export_ply(
    cloud: &PointCloud,
    instances: &[Vec<usize>],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let f = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(f);
    let mut colors = vec![UNASSIGNED_GRAY; cloud.len()];
    for (i, points) in instances.iter().enumerate() {
        let c = instance_color(i);
        for &p in points {
            if p >= cloud.len() {
                return Err(Error::Data(format!(
                    "instance {} references point {} beyond cloud size {}",
                    i,
                    p,
                    cloud.len()
                )));
            }
            colors[p] = c;
        }
    }
    (|| -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", cloud.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
        writeln!(w, "end_header")?;
        for (p, c) in cloud.positions.iter().zip(&colors) {
            writeln!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])?;
        }
        w.flush()
    })()
    .map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn desk_spec() -> SceneSpec {
        SceneSpec::default()
    }

    #[test]
    fn single_instance_scene() {
        let spec = SceneSpec {
            instance_count: (1, 1),
            palette: vec![PrimitiveKind::Box],
            ..desk_spec()
        };
        let cloud = generate_scene(&spec, 7).unwrap();
        let inst: HashSet<i32> = cloud
            .instance_id
            .as_ref()
            .unwrap()
            .iter()
            .copied()
            .filter(|&i| i != NO_INSTANCE)
            .collect();
        assert_eq!(inst.len(), 1);
        let sem: HashSet<i32> = cloud.semantic_id.as_ref().unwrap().iter().copied().collect();
        assert_eq!(sem.len(), 2); // box class + floor class
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = desk_spec();
        let a = generate_scene(&spec, 42).unwrap();
        let b = generate_scene(&spec, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn instance_point_counts_within_spec_range() {
        let spec = desk_spec();
        for seed in 0..100 {
            let cloud = generate_scene(&spec, seed).unwrap();
            let mut counts: HashMap<i32, usize> = HashMap::new();
            for &i in cloud.instance_id.as_ref().unwrap() {
                if i != NO_INSTANCE {
                    *counts.entry(i).or_default() += 1;
                }
            }
            // dense ids from 0
            let max_id = *counts.keys().max().unwrap();
            assert_eq!(counts.len() as i32, max_id + 1);
            for (&id, &c) in &counts {
                assert!(
                    c >= spec.points_per_instance.0 && c <= spec.points_per_instance.1,
                    "seed {} instance {}: {} points",
                    seed,
                    id,
                    c
                );
            }
        }
    }

    #[test]
    fn scene_includes_same_class_pair_when_possible() {
        let spec = SceneSpec { instance_count: (2, 4), ..desk_spec() };
        let cloud = generate_scene(&spec, 3).unwrap();
        let sem = cloud.semantic_id.as_ref().unwrap();
        let inst = cloud.instance_id.as_ref().unwrap();
        let mut by_inst: HashMap<i32, i32> = HashMap::new();
        for (&i, &s) in inst.iter().zip(sem) {
            if i != NO_INSTANCE {
                by_inst.insert(i, s);
            }
        }
        let mut class_counts: HashMap<i32, usize> = HashMap::new();
        for &c in by_inst.values() {
            *class_counts.entry(c).or_default() += 1;
        }
        assert!(class_counts.values().any(|&c| c >= 2));
    }

    #[test]
    fn scene_file_round_trips_bitwise() {
        let cloud = generate_scene(&desk_spec(), 5).unwrap();
        let mut buf = Vec::new();
        write_scene(&cloud, 4, &mut buf).unwrap();
        let (back, c) = read_scene(&mut buf.as_slice()).unwrap();
        assert_eq!(c, 4);
        assert_eq!(cloud, back);
        // bytewise stability
        let mut buf2 = Vec::new();
        write_scene(&back, c, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn scene_file_without_labels_round_trips() {
        let mut cloud = generate_scene(&desk_spec(), 5).unwrap();
        cloud.semantic_id = None;
        cloud.instance_id = None;
        let mut buf = Vec::new();
        write_scene(&cloud, 4, &mut buf).unwrap();
        let (back, _) = read_scene(&mut buf.as_slice()).unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn truncated_scene_file_errors() {
        let cloud = generate_scene(&desk_spec(), 5).unwrap();
        let mut buf = Vec::new();
        write_scene(&cloud, 4, &mut buf).unwrap();
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            read_scene(&mut &truncated[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn version_mismatch_reports_versions() {
        let cloud = generate_scene(&desk_spec(), 5).unwrap();
        let mut buf = Vec::new();
        write_scene(&cloud, 4, &mut buf).unwrap();
        buf[8] = 99;
        match read_scene(&mut buf.as_slice()) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("99") && msg.contains('1'), "{}", msg);
            }
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn ply_export_colors_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = generate_scene(&desk_spec(), 9).unwrap();
        let n = cloud.len();

        // zero instances -> all gray
        let path = dir.path().join("gray.ply");
        export_ply(&cloud, &[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(&format!("element vertex {}", n)));
        let body: Vec<&str> = text.lines().skip_while(|l| *l != "end_header").skip(1).collect();
        assert_eq!(body.len(), n);
        assert!(body.iter().all(|l| l.ends_with("128 128 128")));

        // two instances -> exactly 3 distinct colors
        let path2 = dir.path().join("two.ply");
        let instances = vec![vec![0, 1, 2], vec![3, 4]];
        export_ply(&cloud, &instances, &path2).unwrap();
        let text2 = std::fs::read_to_string(&path2).unwrap();
        let colors: HashSet<String> = text2
            .lines()
            .skip_while(|l| *l != "end_header")
            .skip(1)
            .map(|l| l.split_whitespace().skip(3).collect::<Vec<_>>().join(" "))
            .collect();
        assert_eq!(colors.len(), 3);
    }

    #[test]
    fn golden_scene_file_is_stable() {
        let golden = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/data/golden.scene");
        let spec = SceneSpec { instance_count: (2, 3), ..desk_spec() };
        let cloud = generate_scene(&spec, 2026).unwrap();
        let mut buf = Vec::new();
        write_scene(&cloud, spec.num_classes(), &mut buf).unwrap();
        if std::env::var_os("REGEN_GOLDEN").is_some() {
            std::fs::write(&golden, &buf).unwrap();
        }
        let pinned = std::fs::read(&golden).expect("golden scene file present in repo");
        assert_eq!(buf, pinned, "scene format or generator output drifted");
    }
}
