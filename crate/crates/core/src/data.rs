//! Point-cloud files, synthetic shapes, partial views, input padding and the
//! on-disk dataset layout.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{dist2, farthest_point_sample, Point, PointCloud};

pub const SHAPE_POINTS: usize = 2048;
pub const VIEWS: usize = 8;
pub const DEFAULT_KEEP: usize = 1024;

/// One point per line as three space-separated decimals.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let mut p = [0.0f64; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| parse_err(format!("`{f}` is not a number")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("`{f}` is not finite")));
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), line: 0, msg: "no points".into() });
    }
    PointCloud::new(points)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40);
    for p in &cloud.points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    out
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_text(path, &format_xyz(cloud))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Vertex positions of an ASCII PLY file; other properties and elements are
/// ignored.
pub fn read_ply_ascii(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => Error::Unsupported { path: path.to_path_buf(), msg: "binary PLY".into() },
        _ => Error::io(path, e),
    })?;
    let err = |line: usize, msg: &str| Error::Parse { path: path.to_path_buf(), line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(err(1, "missing `ply` magic")),
    }

    // (name, count, property names) per element, in header order.
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut body_start = None;
    for (i, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => {}
            ["format", fmt, _] => {
                return Err(Error::Unsupported { path: path.to_path_buf(), msg: format!("PLY format `{fmt}`") });
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err(i + 1, "bad element count"))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", _, _, name] | ["property", _, name] => match elements.last_mut() {
                Some(e) => e.2.push(name.to_string()),
                None => return Err(err(i + 1, "property before any element")),
            },
            ["end_header"] => {
                body_start = Some(i + 1);
                break;
            }
            _ => return Err(err(i + 1, "unrecognized header line")),
        }
    }
    let body_start = body_start.ok_or_else(|| err(0, "missing end_header"))?;
    let mut body = text.lines().enumerate().skip(body_start).filter(|(_, l)| !l.trim().is_empty());

    let mut points = Vec::new();
    let mut vertex_seen = false;
    for (name, count, props) in &elements {
        if name != "vertex" {
            for _ in 0..*count {
                body.next().ok_or_else(|| err(0, &format!("fewer `{name}` rows than declared")))?;
            }
            continue;
        }
        vertex_seen = true;
        let col = |axis: &str| props.iter().position(|p| p == axis).ok_or_else(|| err(0, &format!("vertex has no `{axis}`")));
        let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
        for _ in 0..*count {
            let (i, line) = body.next().ok_or_else(|| err(0, &format!("fewer vertex rows than the declared {count}")))?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < props.len() {
                return Err(err(i + 1, "vertex row has too few values"));
            }
            let num = |c: usize| -> Result<f64> { tok[c].parse().map_err(|_| err(i + 1, "non-numeric vertex value")) };
            points.push([num(cx)?, num(cy)?, num(cz)?]);
        }
    }
    if !vertex_seen {
        return Err(err(0, "no vertex element"));
    }
    if let Some((i, _)) = body.next() {
        return Err(err(i + 1, "more rows than the header declares"));
    }
    PointCloud::new(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    PlaneLike,
    TableLike,
    Cuboid,
    Cylinder,
    Composite,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] =
        [ShapeKind::PlaneLike, ShapeKind::TableLike, ShapeKind::Cuboid, ShapeKind::Cylinder, ShapeKind::Composite];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::PlaneLike => "plane",
            ShapeKind::TableLike => "table",
            ShapeKind::Cuboid => "cuboid",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Composite => "composite",
        }
    }

    /// Mirror-symmetric across `x = 0`.
    pub fn is_symmetric(self) -> bool {
        matches!(self, ShapeKind::PlaneLike | ShapeKind::TableLike)
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown shape kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    /// Axis-aligned box surface, center and half extents.
    Box { c: Point, h: Point },
    /// Closed cylinder along y.
    Cylinder { c: Point, r: f64, half_height: f64 },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Box { h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Primitive::Cylinder { r, half_height, .. } => {
                let pi = std::f64::consts::PI;
                4.0 * pi * r * half_height + 2.0 * pi * r * r
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Point {
        match *self {
            Primitive::Box { c, h } => {
                let faces = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let pick = rng.gen::<f64>() * (faces[0] + faces[1] + faces[2]);
                let axis = if pick < faces[0] { 0 } else if pick < faces[0] + faces[1] { 1 } else { 2 };
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = c[k] + if k == axis { if rng.gen::<bool>() { h[k] } else { -h[k] } } else { rng.gen_range(-h[k]..=h[k]) };
                }
                p
            }
            Primitive::Cylinder { c, r, half_height } => {
                let side = 2.0 * half_height;
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                if rng.gen::<f64>() * (side + r) < side {
                    [c[0] + r * theta.cos(), c[1] + rng.gen_range(-half_height..=half_height), c[2] + r * theta.sin()]
                } else {
                    let rho = r * rng.gen::<f64>().sqrt();
                    let y = if rng.gen::<bool>() { half_height } else { -half_height };
                    [c[0] + rho * theta.cos(), c[1] + y, c[2] + rho * theta.sin()]
                }
            }
        }
    }
}

fn assembly(kind: ShapeKind, rng: &mut impl Rng) -> Vec<Primitive> {
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    match kind {
        ShapeKind::PlaneLike => {
            // Fuselage along z, wings and stabilizer along x, fin on top.
            let (len, r) = (u(0.8, 1.0), u(0.07, 0.11));
            let (span, chord, wz) = (u(0.7, 1.0), u(0.15, 0.25), u(-0.1, 0.15));
            let (tail_span, fin) = (u(0.25, 0.4), u(0.15, 0.25));
            vec![
                Primitive::Box { c: [0.0, 0.0, 0.0], h: [r, r, len] },
                Primitive::Box { c: [0.0, 0.0, wz], h: [span, 0.015, chord] },
                Primitive::Box { c: [0.0, 0.0, -len + 0.08], h: [tail_span, 0.01, 0.07] },
                Primitive::Box { c: [0.0, r + fin, -len + 0.08], h: [0.01, fin, 0.07] },
            ]
        }
        ShapeKind::TableLike => {
            let (a, b, top_y, t, leg) = (u(0.6, 1.0), u(0.4, 0.7), u(0.5, 0.8), u(0.03, 0.06), u(0.03, 0.06));
            let mut parts = vec![Primitive::Box { c: [0.0, top_y, 0.0], h: [a, t, b] }];
            for (sx, sz) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let c = [sx * (a - 2.0 * leg), top_y / 2.0 - t / 2.0, sz * (b - 2.0 * leg)];
                parts.push(Primitive::Box { c, h: [leg, top_y / 2.0 - t / 2.0, leg] });
            }
            parts
        }
        ShapeKind::Cuboid => vec![Primitive::Box { c: [0.0; 3], h: [u(0.2, 1.0), u(0.2, 1.0), u(0.2, 1.0)] }],
        ShapeKind::Cylinder => vec![Primitive::Cylinder { c: [0.0; 3], r: u(0.2, 0.6), half_height: u(0.2, 1.0) }],
        ShapeKind::Composite => {
            let (bx, by, bz) = (u(0.4, 0.8), u(0.1, 0.3), u(0.3, 0.6));
            let r = u(0.1, 0.25);
            let hh = u(0.2, 0.5);
            vec![
                Primitive::Box { c: [0.0, 0.0, 0.0], h: [bx, by, bz] },
                Primitive::Cylinder { c: [bx * 0.5, by + hh, -bz * 0.3], r, half_height: hh },
                Primitive::Box { c: [-bx * 0.6, by + 0.1, bz * 0.4], h: [0.1, 0.1, 0.1] },
            ]
        }
    }
}

fn sample_assembly(parts: &[Primitive], n: usize, rng: &mut impl Rng) -> Vec<Point> {
    let areas: Vec<f64> = parts.iter().map(Primitive::area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen::<f64>() * total;
            let mut idx = parts.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            parts[idx].sample(rng)
        })
        .collect()
}

/// 2048 area-uniform surface samples of a seeded primitive assembly,
/// normalized. Symmetric kinds emit 1024 samples followed by their mirror
/// images across `x = 0`.
pub fn synth_shape(kind: ShapeKind, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = assembly(kind, &mut rng);
    let points = if kind.is_symmetric() {
        let half = sample_assembly(&parts, SHAPE_POINTS / 2, &mut rng);
        let mirrored: Vec<Point> = half.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        [half, mirrored].concat()
    } else {
        sample_assembly(&parts, SHAPE_POINTS, &mut rng)
    };
    let cloud = PointCloud::new(points).expect("finite samples");
    if kind.is_symmetric() {
        // The centroid is 0 on x by construction; keep it exactly so, so
        // normalization does not break the mirror pairing.
        let (mut c, scale) = cloud.normalization();
        c[0] = 0.0;
        cloud.apply_normalization(c, scale)
    } else {
        cloud.normalized()
    }
}

/// Removes the `len − keep` points nearest to the point lying farthest along
/// `−viewpoint`, keeping the original order of the rest.
pub fn make_partial(complete: &PointCloud, viewpoint: Point, keep: usize) -> Result<PointCloud> {
    if viewpoint.iter().all(|&v| v == 0.0) {
        return Err(Error::Data("viewpoint must be non-zero".into()));
    }
    if keep == 0 || keep > complete.len() {
        return Err(Error::Data(format!("keep {keep} outside 1..={}", complete.len())));
    }
    let depth = |p: &Point| -(p[0] * viewpoint[0] + p[1] * viewpoint[1] + p[2] * viewpoint[2]);
    let anchor = (0..complete.len())
        .max_by(|&a, &b| depth(&complete.points[a]).total_cmp(&depth(&complete.points[b])).then(b.cmp(&a)))
        .expect("non-empty cloud");
    let a = complete.points[anchor];
    let mut order: Vec<usize> = (0..complete.len()).collect();
    order.sort_by(|&i, &j| dist2(&complete.points[i], &a).total_cmp(&dist2(&complete.points[j], &a)).then(i.cmp(&j)));
    let mut removed = vec![false; complete.len()];
    for &i in &order[..complete.len() - keep] {
        removed[i] = true;
    }
    let kept: Vec<usize> = (0..complete.len()).filter(|&i| !removed[i]).collect();
    Ok(complete.select(&kept))
}

/// Cube-corner viewing directions.
pub fn viewpoints() -> [Point; VIEWS] {
    let mut out = [[0.0; 3]; VIEWS];
    for (v, slot) in out.iter_mut().enumerate() {
        *slot = [0, 1, 2].map(|bit| if v >> bit & 1 == 1 { 1.0 } else { -1.0 });
    }
    out
}

/// Random `n`-subset (original order kept) when larger; the original points
/// followed by uniformly resampled duplicates when smaller.
pub fn pad_to_input_size(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::Data("cannot pad an empty cloud".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cloud.len();
    if len > n {
        let mut idx = sample(&mut rng, len, n).into_vec();
        idx.sort_unstable();
        return Ok(cloud.select(&idx));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.extend((len..n).map(|_| rng.gen_range(0..len)));
    Ok(cloud.select(&idx))
}

/// One shape of a dataset split.
#[derive(Clone, Debug)]
pub struct ShapeRecord {
    pub shape_id: String,
    pub category: String,
    pub complete: PointCloud,
    pub partials: Vec<PointCloud>,
}

fn shape_seed(master: u64, index: usize) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// Writes `root/<split>/<shape_id>/{complete,partial_<v>}.xyz` and
/// `root/<split>/index.txt`. Kinds cycle through [`ShapeKind::ALL`];
/// `points` below the native resolution thins each shape by FPS.
pub fn generate_split(root: &Path, split: &str, shapes: usize, seed: u64, points: usize, keep: usize) -> Result<Vec<String>> {
    if points == 0 || points > SHAPE_POINTS || keep == 0 || keep > points {
        return Err(Error::Data(format!("need 0 < keep ({keep}) <= points ({points}) <= {SHAPE_POINTS}")));
    }
    let dir = split_dir(root, split);
    let mut index = String::new();
    let mut ids = Vec::with_capacity(shapes);
    for i in 0..shapes {
        let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
        let id = format!("{kind}_{i:04}");
        let mut complete = synth_shape(kind, shape_seed(seed, i));
        if points < SHAPE_POINTS {
            complete = complete.select(&farthest_point_sample(&complete, points)?);
        }
        let shape_dir = dir.join(&id);
        write_xyz(&shape_dir.join("complete.xyz"), &complete)?;
        for (v, view) in viewpoints().iter().enumerate() {
            let partial = make_partial(&complete, *view, keep)?;
            write_xyz(&shape_dir.join(format!("partial_{v}.xyz")), &partial)?;
        }
        index.push_str(&format!("{id} {kind}\n"));
        ids.push(id);
    }
    write_text(&dir.join("index.txt"), &index)?;
    Ok(ids)
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<ShapeRecord>> {
    let dir = split_dir(root, split);
    let index_path = dir.join("index.txt");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let [id, category] = tok.as_slice() else {
            return Err(Error::Parse { path: index_path.clone(), line: i + 1, msg: "expected `shape_id category`".into() });
        };
        let shape_dir = dir.join(id);
        let complete = read_xyz(&shape_dir.join("complete.xyz"))?;
        let partials = (0..VIEWS).map(|v| read_xyz(&shape_dir.join(format!("partial_{v}.xyz")))).collect::<Result<_>>()?;
        out.push(ShapeRecord { shape_id: id.to_string(), category: category.to_string(), complete, partials });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("split `{split}` in {} has no shapes", root.display())));
    }
    Ok(out)
}
