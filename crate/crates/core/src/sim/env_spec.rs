//! Environment description files.
//!
//! A file is a list of `key = value` lines; `#` starts a comment. Recognized
//! keys are `name`, `bounds` (width height), `start_pose` (x y heading),
//! `step_limit`, and the repeatable `walls` (x1 y1 x2 y2) and `obstacles`
//! (radius speed x y). Several walls or obstacles may share one line when
//! separated by `;`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::geometry::{Point, Segment};
use super::ROBOT_RADIUS;
use crate::error::{Error, Result};

/// A dynamic obstacle definition: a disc doing a random walk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub radius: f64,
    pub speed: f64,
    pub position: Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub name: String,
    pub width: f64,
    pub height: f64,
    pub walls: Vec<Segment>,
    pub start_pose: Pose,
    pub obstacles: Vec<ObstacleSpec>,
    pub step_limit: usize,
}

/// Names of the environments shipped with the crate.
pub const BUILTIN_NAMES: [&str; 4] = ["simple", "complex", "maze", "dynamic"];

fn builtin_source(name: &str) -> Option<&'static str> {
    match name {
        "simple" => Some(include_str!("../../data/envs/simple.env")),
        "complex" => Some(include_str!("../../data/envs/complex.env")),
        "maze" => Some(include_str!("../../data/envs/maze.env")),
        "dynamic" => Some(include_str!("../../data/envs/dynamic.env")),
        _ => None,
    }
}

/// Environment variable overriding the environment-file directory.
pub const DATA_DIR_VAR: &str = "DVXS_DATA_DIR";

impl EnvironmentSpec {
    /// Loads an environment by name or path.
    ///
    /// A name resolves to `$DVXS_DATA_DIR/<name>.env` when the variable is
    /// set, otherwise to the built-in copy. Anything containing a path
    /// separator or ending in `.env` is read as a file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let looks_like_path = name_or_path.contains('/') || name_or_path.ends_with(".env");
        if looks_like_path {
            return Self::from_file(Path::new(name_or_path));
        }
        if let Ok(dir) = std::env::var(DATA_DIR_VAR) {
            let p = PathBuf::from(dir).join(format!("{name_or_path}.env"));
            return Self::from_file(&p);
        }
        Self::builtin(name_or_path)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let src = builtin_source(name).ok_or_else(|| {
            Error::Environment(format!(
                "unknown environment `{name}` (built-ins: {})",
                BUILTIN_NAMES.join(", ")
            ))
        })?;
        Self::parse(src, &format!("<builtin:{name}>"))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::parse(&src, &path.display().to_string())
    }

    pub fn parse(src: &str, file: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            file: file.to_string(),
            line,
            msg,
        };
        let mut name = None;
        let mut bounds = None;
        let mut start = None;
        let mut step_limit = None;
        let mut walls = Vec::new();
        let mut obstacles = Vec::new();
        let mut wall_lines = Vec::new();

        for (idx, raw) in src.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            let floats = |v: &str, n: usize, field: &str| -> Result<Vec<f64>> {
                let parsed: std::result::Result<Vec<f64>, _> = v.split_whitespace().map(str::parse::<f64>).collect();
                let parsed = parsed.map_err(|e| err(line_no, format!("{field}: {e}")))?;
                if parsed.len() != n {
                    return Err(err(line_no, format!("{field}: expected {n} numbers, got {}", parsed.len())));
                }
                if parsed.iter().any(|v| !v.is_finite()) {
                    return Err(err(line_no, format!("{field}: non-finite value")));
                }
                Ok(parsed)
            };
            match key {
                "name" => name = Some(value.to_string()),
                "bounds" => {
                    let v = floats(value, 2, "bounds")?;
                    if v[0] <= 0.0 || v[1] <= 0.0 {
                        return Err(err(line_no, "bounds: width and height must be positive".into()));
                    }
                    bounds = Some((v[0], v[1]));
                }
                "start_pose" => {
                    let v = floats(value, 3, "start_pose")?;
                    start = Some(Pose {
                        x: v[0],
                        y: v[1],
                        heading: v[2],
                    });
                }
                "step_limit" => {
                    let n: usize = value
                        .parse()
                        .map_err(|e| err(line_no, format!("step_limit: {e}")))?;
                    if n == 0 {
                        return Err(err(line_no, "step_limit: must be positive".into()));
                    }
                    step_limit = Some(n);
                }
                "walls" | "wall" => {
                    for part in value.split(';').filter(|p| !p.trim().is_empty()) {
                        let v = floats(part, 4, "walls")?;
                        let seg = Segment::new(v[0], v[1], v[2], v[3]);
                        if seg.is_degenerate() {
                            return Err(err(line_no, "walls: zero-length segment".into()));
                        }
                        walls.push(seg);
                        wall_lines.push(line_no);
                    }
                }
                "obstacles" | "obstacle" => {
                    for part in value.split(';').filter(|p| !p.trim().is_empty()) {
                        let v = floats(part, 4, "obstacles")?;
                        if v[0] <= 0.0 {
                            return Err(err(line_no, "obstacles: radius must be positive".into()));
                        }
                        if v[1] < 0.0 {
                            return Err(err(line_no, "obstacles: speed must be nonnegative".into()));
                        }
                        obstacles.push(ObstacleSpec {
                            radius: v[0],
                            speed: v[1],
                            position: Point::new(v[2], v[3]),
                        });
                    }
                }
                other => return Err(err(line_no, format!("unknown key `{other}`"))),
            }
        }

        let missing = |k: &str| err(0, format!("missing required key `{k}`"));
        let (width, height) = bounds.ok_or_else(|| missing("bounds"))?;
        let spec = EnvironmentSpec {
            name: name.ok_or_else(|| missing("name"))?,
            width,
            height,
            walls,
            start_pose: start.ok_or_else(|| missing("start_pose"))?,
            obstacles,
            step_limit: step_limit.ok_or_else(|| missing("step_limit"))?,
        };
        spec.validate().map_err(|(i, msg)| {
            let line = i.map(|i| wall_lines[i]).unwrap_or(0);
            err(line, msg)
        })?;
        Ok(spec)
    }

    /// Checks the geometric invariants; on failure returns the offending wall index, if any.
    fn validate(&self) -> std::result::Result<(), (Option<usize>, String)> {
        let inside = |p: Point| p.x >= -1e-9 && p.y >= -1e-9 && p.x <= self.width + 1e-9 && p.y <= self.height + 1e-9;
        for (i, w) in self.walls.iter().enumerate() {
            if !inside(w.a) || !inside(w.b) {
                return Err((Some(i), format!("walls: segment {w:?} leaves the {}x{} bounds", self.width, self.height)));
            }
        }
        let s = Point::new(self.start_pose.x, self.start_pose.y);
        if !inside(s) {
            return Err((None, "start_pose: outside bounds".into()));
        }
        for (i, w) in self.walls.iter().enumerate() {
            if w.distance_to(s) < ROBOT_RADIUS {
                return Err((Some(i), format!("start_pose: within robot radius of wall {w:?}")));
            }
        }
        for o in &self.obstacles {
            if !inside(o.position) {
                return Err((None, "obstacles: initial position outside bounds".into()));
            }
        }
        Ok(())
    }

    /// Serializes back to the file format.
    pub fn to_file_string(&self) -> String {
        let mut s = format!(
            "name = {}\nbounds = {} {}\nstart_pose = {} {} {}\nstep_limit = {}\n",
            self.name, self.width, self.height, self.start_pose.x, self.start_pose.y, self.start_pose.heading, self.step_limit
        );
        for w in &self.walls {
            s.push_str(&format!("walls = {} {} {} {}\n", w.a.x, w.a.y, w.b.x, w.b.y));
        }
        for o in &self.obstacles {
            s.push_str(&format!(
                "obstacles = {} {} {} {}\n",
                o.radius, o.speed, o.position.x, o.position.y
            ));
        }
        s
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_have_documented_sizes() {
        let s = EnvironmentSpec::builtin("simple").unwrap();
        assert_eq!((s.width, s.height), (20.0, 20.0));
        let c = EnvironmentSpec::builtin("complex").unwrap();
        assert_eq!((c.width, c.height), (30.0, 30.0));
        let m = EnvironmentSpec::builtin("maze").unwrap();
        assert_eq!((m.width, m.height), (25.0, 30.0));
        let d = EnvironmentSpec::builtin("dynamic").unwrap();
        assert_eq!((d.width, d.height), (30.0, 30.0));
        assert!((5..=8).contains(&d.obstacles.len()));
        assert!(c.obstacles.is_empty());
    }

    #[test]
    fn open_arena_is_valid() {
        let s = EnvironmentSpec::parse("name = open\nbounds = 10 10\nstart_pose = 5 5 0\nstep_limit = 10\n", "t").unwrap();
        assert!(s.walls.is_empty());
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let src = "name = x\nbounds = 10 10\nstart_pose = 5 5 0\nstep_limit = 10\nwalls = 0 0 1\n";
        match EnvironmentSpec::parse(src, "f.env") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("walls"));
            }
            other => panic!("{other:?}"),
        }
        let src = "name = x\nbounds = 10 10\nstart_pose = 5 5 0\nstep_limit = 10\nwalls = 0 0 11 0\n";
        assert!(matches!(EnvironmentSpec::parse(src, "f"), Err(Error::Parse { line: 5, .. })));
        let src = "name = x\nbounds = 10 10\nstart_pose = 5 5 0\nstep_limit = 10\nwalls = 5.1 0 5.1 10\n";
        assert!(matches!(EnvironmentSpec::parse(src, "f"), Err(Error::Parse { line: 5, .. })));
        let src = "name = x\nbounds = 10 10\nstart_pose = 5 5 0\nstep_limit = 10\ncolour = red\n";
        assert!(EnvironmentSpec::parse(src, "f").is_err());
        assert!(EnvironmentSpec::parse("name = x\n", "f").is_err());
    }

    #[test]
    fn file_roundtrip() {
        for name in BUILTIN_NAMES {
            let s = EnvironmentSpec::builtin(name).unwrap();
            let back = EnvironmentSpec::parse(&s.to_file_string(), "rt").unwrap();
            assert_eq!(s, back);
        }
    }

    #[test]
    fn unknown_builtin() {
        assert!(EnvironmentSpec::builtin("nowhere").is_err());
    }
}
