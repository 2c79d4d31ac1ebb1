//! Scene files: a flat, line-oriented `key = value` format with sections.
//!
//! ```text
//! # comment
//! [surface lens]
//! kind = sphere
//! center = 0 0 -20
//! radius = 25
//!
//! [system]
//! ambient = 1
//! interface = lens refract 1 1.5
//!
//! [family]
//! kind = point_source
//! apex = 0 0 10
//! axis = 0 0 -1
//! domain = -0.1 0.1 -0.1 0.1
//! grid = 21
//!
//! [options]
//! tol = 1e-6
//! ```
//!
//! Every key is checked against the schema of its section; anything not
//! listed there is an error.

use std::collections::HashSet;
use std::path::PathBuf;

use nalgebra::{Matrix3, Vector2};
use raylines::families::{Domain, Param, RayFamily};
use raylines::line_space::Vec3;
use raylines::optics::{Interface, OpticalSystem, OpticsError};
use raylines::surfaces::{ImplicitSurface, Side};
use raylines::variational::Epsilon;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("line {line}, column {col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("unknown surface \"{0}\"")]
    UnknownSurface(String),
    #[error("bad media chain at interface {index}: {reason}")]
    BadMediaChain { index: usize, reason: String },
    #[error("section [{section}] is missing key \"{key}\"")]
    MissingKey { section: String, key: String },
    #[error("missing section [{0}]")]
    MissingSection(&'static str),
}

/// Settings shared by the subcommands. `None` means "use the library default".
#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    pub tol: Option<f64>,
    pub step: Option<f64>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Base parameter of wavefronts and mirror designs.
    pub k0: Option<Param>,
    /// Wavefront offset `c`.
    pub c: f64,
    pub focus: Option<Vec3>,
    pub epsilon: Epsilon,
    /// Signed distance along `L(k0)` from its foot point to the mirror seed point.
    pub seed_distance: f64,
    pub m1: Option<Vec3>,
    pub m2: Option<Vec3>,
    /// Number of sampled lines for `check-symplectic`.
    pub samples: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            tol: None,
            step: None,
            seed: 0,
            out: None,
            k0: None,
            c: 0.0,
            focus: None,
            epsilon: Epsilon::Plus,
            seed_distance: 1.0,
            m1: None,
            m2: None,
            samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Named surfaces in file order.
    pub surfaces: Vec<(String, ImplicitSurface)>,
    pub system: OpticalSystem,
    pub family: RayFamily,
    pub grid: usize,
    pub options: Options,
}

impl Scene {
    pub fn surface(&self, name: &str) -> Option<&ImplicitSurface> {
        self.surfaces.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    /// Column where the value starts, 1-based.
    col: usize,
}

#[derive(Debug, Clone)]
struct Section {
    kind: String,
    name: Option<String>,
    line: usize,
    entries: Vec<Entry>,
}

fn syntax(line: usize, col: usize, message: impl Into<String>) -> SceneError {
    SceneError::Syntax {
        line,
        col,
        message: message.into(),
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>, SceneError> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = content.len() - content.trim_start().len();
        if let Some(rest) = trimmed.strip_prefix('[') {
            let inner = rest
                .strip_suffix(']')
                .ok_or_else(|| syntax(line, indent + trimmed.len(), "expected ']'"))?;
            let mut words = inner.split_whitespace();
            let kind = words.next().unwrap_or("").to_string();
            let name = words.next().map(str::to_string);
            if words.next().is_some() {
                return Err(syntax(line, indent + 1, "too many words in section header"));
            }
            match (kind.as_str(), &name) {
                ("surface", Some(_)) | ("system" | "family" | "options", None) => {}
                ("surface", None) => {
                    return Err(syntax(line, indent + 1, "[surface] needs a name"));
                }
                _ => {
                    return Err(syntax(line, indent + 1, format!("unknown section [{inner}]")));
                }
            }
            sections.push(Section {
                kind,
                name,
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let eq = trimmed
            .find('=')
            .ok_or_else(|| syntax(line, indent + 1, "expected 'key = value'"))?;
        let key = trimmed[..eq].trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(syntax(line, indent + 1, "malformed key"));
        }
        let after = &trimmed[eq + 1..];
        let value = after.trim();
        let col = indent + eq + 2 + (after.len() - after.trim_start().len());
        let Some(section) = sections.last_mut() else {
            return Err(syntax(line, indent + 1, "key outside of any section"));
        };
        section.entries.push(Entry {
            key: key.to_string(),
            value: value.to_string(),
            line,
            col,
        });
    }
    Ok(sections)
}

/// Looks keys up in a section while enforcing the schema.
struct Keys<'a> {
    section: &'a Section,
    label: String,
}

impl<'a> Keys<'a> {
    fn new(section: &'a Section, allowed: &[&str], repeatable: &[&str]) -> Result<Self, SceneError> {
        let mut seen = HashSet::new();
        for e in &section.entries {
            if !allowed.contains(&e.key.as_str()) {
                return Err(syntax(e.line, 1, format!("unknown key \"{}\"", e.key)));
            }
            if !repeatable.contains(&e.key.as_str()) && !seen.insert(e.key.as_str()) {
                return Err(syntax(e.line, 1, format!("duplicate key \"{}\"", e.key)));
            }
        }
        let label = match &section.name {
            Some(n) => format!("{} {n}", section.kind),
            None => section.kind.clone(),
        };
        Ok(Self { section, label })
    }

    fn get(&self, key: &str) -> Option<&'a Entry> {
        self.section.entries.iter().find(|e| e.key == key)
    }

    fn require(&self, key: &str) -> Result<&'a Entry, SceneError> {
        self.get(key).ok_or_else(|| SceneError::MissingKey {
            section: self.label.clone(),
            key: key.to_string(),
        })
    }

    fn numbers(&self, key: &str, count: usize) -> Result<Option<Vec<f64>>, SceneError> {
        self.get(key).map(|e| numbers(e, count)).transpose()
    }

    fn required_numbers(&self, key: &str, count: usize) -> Result<Vec<f64>, SceneError> {
        numbers(self.require(key)?, count)
    }

    fn vec3(&self, key: &str) -> Result<Vec3, SceneError> {
        let v = self.required_numbers(key, 3)?;
        Ok(Vec3::new(v[0], v[1], v[2]))
    }

    fn scalar(&self, key: &str) -> Result<f64, SceneError> {
        Ok(self.required_numbers(key, 1)?[0])
    }
}

/// Parses exactly `count` whitespace-separated finite numbers.
fn numbers(e: &Entry, count: usize) -> Result<Vec<f64>, SceneError> {
    let mut out = Vec::with_capacity(count);
    let mut offset = 0;
    for word in e.value.split_whitespace() {
        let start = offset + e.value[offset..].find(word).unwrap_or(0);
        offset = start + word.len();
        let x: f64 = word
            .parse()
            .map_err(|_| syntax(e.line, e.col + start, format!("\"{word}\" is not a number")))?;
        if !x.is_finite() {
            return Err(syntax(e.line, e.col + start, "number must be finite"));
        }
        out.push(x);
    }
    if out.len() != count {
        return Err(syntax(
            e.line,
            e.col,
            format!("\"{}\" expects {count} number(s), got {}", e.key, out.len()),
        ));
    }
    Ok(out)
}

fn integer(e: &Entry) -> Result<u64, SceneError> {
    e.value
        .parse()
        .map_err(|_| syntax(e.line, e.col, format!("\"{}\" is not a non-negative integer", e.value)))
}

fn parse_surface(section: &Section) -> Result<ImplicitSurface, SceneError> {
    let kind_entry = section
        .entries
        .iter()
        .find(|e| e.key == "kind")
        .ok_or_else(|| SceneError::MissingKey {
            section: format!("surface {}", section.name.as_deref().unwrap_or("")),
            key: "kind".into(),
        })?;
    let specific: &[&str] = match kind_entry.value.as_str() {
        "plane" => &["normal", "offset"],
        "sphere" => &["center", "radius"],
        "quadric" => &["a", "b", "c"],
        "sinusoid" => &["amplitude", "wavevector", "offset"],
        other => {
            return Err(syntax(
                kind_entry.line,
                kind_entry.col,
                format!("unknown surface kind \"{other}\""),
            ))
        }
    };
    let allowed: Vec<&str> = ["kind", "incoming"].iter().chain(specific).copied().collect();
    let keys = Keys::new(section, &allowed, &[])?;
    let invalid = |e: raylines::surfaces::SurfaceError| syntax(kind_entry.line, kind_entry.col, e.to_string());
    let surface = match kind_entry.value.as_str() {
        "plane" => ImplicitSurface::plane(keys.vec3("normal")?, keys.scalar("offset")?).map_err(invalid)?,
        "sphere" => ImplicitSurface::sphere(keys.vec3("center")?, keys.scalar("radius")?).map_err(invalid)?,
        "quadric" => {
            let a = keys.required_numbers("a", 9)?;
            ImplicitSurface::quadric(Matrix3::from_row_slice(&a), keys.vec3("b")?, keys.scalar("c")?)
                .map_err(invalid)?
        }
        _ => {
            let k = keys.required_numbers("wavevector", 2)?;
            ImplicitSurface::sinusoid(
                keys.scalar("amplitude")?,
                Vector2::new(k[0], k[1]),
                keys.scalar("offset")?,
            )
        }
    };
    Ok(match keys.get("incoming") {
        None => surface,
        Some(e) => match e.value.as_str() {
            "positive" => surface.with_incoming(Side::Positive),
            "negative" => surface.with_incoming(Side::Negative),
            other => return Err(syntax(e.line, e.col, format!("incoming must be positive or negative, got \"{other}\""))),
        },
    })
}

fn parse_system(
    section: &Section,
    surfaces: &[(String, ImplicitSurface)],
) -> Result<OpticalSystem, SceneError> {
    let keys = Keys::new(section, &["ambient", "interface"], &["interface"])?;
    let ambient = keys.scalar("ambient")?;
    let mut interfaces = Vec::new();
    for e in section.entries.iter().filter(|e| e.key == "interface") {
        let words: Vec<&str> = e.value.split_whitespace().collect();
        let (name, action, indices) = match words.as_slice() {
            [name, action, rest @ ..] => (*name, *action, rest),
            _ => return Err(syntax(e.line, e.col, "expected 'interface = <surface> reflect|refract n_in [n_out]'")),
        };
        let surface = surfaces
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.clone())
            .ok_or_else(|| SceneError::UnknownSurface(name.to_string()))?;
        let parsed = indices
            .iter()
            .map(|w| {
                w.parse::<f64>()
                    .map_err(|_| syntax(e.line, e.col, format!("\"{w}\" is not a number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let interface = match (action, parsed.as_slice()) {
            ("reflect", [n]) => Interface::reflect(surface, *n),
            ("refract", [n_in, n_out]) => Interface::refract(surface, *n_in, *n_out),
            ("reflect", _) => return Err(syntax(e.line, e.col, "reflect takes one index")),
            ("refract", _) => return Err(syntax(e.line, e.col, "refract takes two indices")),
            (other, _) => return Err(syntax(e.line, e.col, format!("unknown action \"{other}\""))),
        };
        interfaces.push(interface);
    }
    OpticalSystem::new(ambient, interfaces).map_err(|err| match err {
        OpticsError::BadMediaChain { index, .. } | OpticsError::BadIndex { index, .. } => {
            SceneError::BadMediaChain {
                index,
                reason: err.to_string(),
            }
        }
        other => SceneError::BadMediaChain {
            index: 0,
            reason: other.to_string(),
        },
    })
}

fn parse_family(
    section: &Section,
    surfaces: &[(String, ImplicitSurface)],
) -> Result<(RayFamily, usize), SceneError> {
    let kind_entry = section
        .entries
        .iter()
        .find(|e| e.key == "kind")
        .ok_or_else(|| SceneError::MissingKey {
            section: "family".into(),
            key: "kind".into(),
        })?;
    let specific: &[&str] = match kind_entry.value.as_str() {
        "point_source" => &["apex", "axis"],
        "collimated" => &["direction", "origin"],
        "normal_congruence" => &["surface", "anchor"],
        "two_skew_lines" => &["p1", "d1", "p2", "d2"],
        other => {
            return Err(syntax(
                kind_entry.line,
                kind_entry.col,
                format!("unknown family kind \"{other}\""),
            ))
        }
    };
    let allowed: Vec<&str> = ["kind", "domain", "grid"].iter().chain(specific).copied().collect();
    let keys = Keys::new(section, &allowed, &[])?;
    let d = keys.required_numbers("domain", 4)?;
    let domain_entry = keys.require("domain")?;
    let domain = Domain::new((d[0], d[1]), (d[2], d[3]))
        .map_err(|e| syntax(domain_entry.line, domain_entry.col, e.to_string()))?;
    let grid_entry = keys.require("grid")?;
    let grid = integer(grid_entry)? as usize;
    if grid < 3 {
        return Err(syntax(grid_entry.line, grid_entry.col, "grid must be at least 3"));
    }
    let family = match kind_entry.value.as_str() {
        "point_source" => RayFamily::point_source(keys.vec3("apex")?, keys.vec3("axis")?, domain),
        "collimated" => RayFamily::collimated(keys.vec3("direction")?, keys.vec3("origin")?, domain),
        "normal_congruence" => {
            let e = keys.require("surface")?;
            let surface = surfaces
                .iter()
                .find(|(n, _)| *n == e.value)
                .map(|(_, s)| s)
                .ok_or_else(|| SceneError::UnknownSurface(e.value.clone()))?;
            RayFamily::normal_congruence(surface, &keys.vec3("anchor")?, domain)
                .map_err(|err| syntax(e.line, e.col, err.to_string()))?
        }
        _ => RayFamily::two_skew_lines(
            keys.vec3("p1")?,
            keys.vec3("d1")?,
            keys.vec3("p2")?,
            keys.vec3("d2")?,
            domain,
        ),
    };
    Ok((family, grid))
}

fn parse_options(section: &Section) -> Result<Options, SceneError> {
    let keys = Keys::new(
        section,
        &[
            "tol",
            "step",
            "seed",
            "out",
            "k0",
            "c",
            "focus",
            "epsilon",
            "seed_distance",
            "m1",
            "m2",
            "samples",
        ],
        &[],
    )?;
    let mut o = Options::default();
    let positive = |key: &str| -> Result<Option<f64>, SceneError> {
        match keys.numbers(key, 1)? {
            None => Ok(None),
            Some(v) if v[0] > 0.0 => Ok(Some(v[0])),
            Some(_) => {
                let e = keys.require(key)?;
                Err(syntax(e.line, e.col, format!("\"{key}\" must be positive")))
            }
        }
    };
    o.tol = positive("tol")?;
    o.step = positive("step")?;
    if let Some(e) = keys.get("seed") {
        o.seed = integer(e)?;
    }
    if let Some(e) = keys.get("out") {
        o.out = Some(PathBuf::from(&e.value));
    }
    o.k0 = keys.numbers("k0", 2)?.map(|v| Param::new(v[0], v[1]));
    if let Some(v) = keys.numbers("c", 1)? {
        o.c = v[0];
    }
    let point = |key: &str| -> Result<Option<Vec3>, SceneError> {
        Ok(keys.numbers(key, 3)?.map(|v| Vec3::new(v[0], v[1], v[2])))
    };
    o.focus = point("focus")?;
    o.m1 = point("m1")?;
    o.m2 = point("m2")?;
    if let Some(e) = keys.get("epsilon") {
        o.epsilon = match e.value.as_str() {
            "+1" | "1" | "plus" => Epsilon::Plus,
            "-1" | "minus" => Epsilon::Minus,
            other => return Err(syntax(e.line, e.col, format!("epsilon must be +1 or -1, got \"{other}\""))),
        };
    }
    if let Some(v) = keys.numbers("seed_distance", 1)? {
        o.seed_distance = v[0];
    }
    if let Some(e) = keys.get("samples") {
        o.samples = integer(e)? as usize;
        if o.samples == 0 {
            return Err(syntax(e.line, e.col, "samples must be positive"));
        }
    }
    Ok(o)
}

pub fn parse_scene(text: &str) -> Result<Scene, SceneError> {
    let sections = split_sections(text)?;
    let mut surfaces: Vec<(String, ImplicitSurface)> = Vec::new();
    for s in sections.iter().filter(|s| s.kind == "surface") {
        let name = s.name.clone().unwrap_or_default();
        if surfaces.iter().any(|(n, _)| *n == name) {
            return Err(syntax(s.line, 1, format!("surface \"{name}\" defined twice")));
        }
        surfaces.push((name, parse_surface(s)?));
    }
    let single = |kind: &'static str| -> Result<Option<&Section>, SceneError> {
        let mut found = sections.iter().filter(|s| s.kind == kind);
        let first = found.next();
        if let Some(dup) = found.next() {
            return Err(syntax(dup.line, 1, format!("section [{kind}] appears twice")));
        }
        Ok(first)
    };
    let system = match single("system")? {
        Some(s) => parse_system(s, &surfaces)?,
        None => OpticalSystem::empty(1.0),
    };
    let family_section = single("family")?.ok_or(SceneError::MissingSection("family"))?;
    let (family, grid) = parse_family(family_section, &surfaces)?;
    let options = match single("options")? {
        Some(s) => parse_options(s)?,
        None => Options::default(),
    };
    Ok(Scene {
        surfaces,
        system,
        family,
        grid,
        options,
    })
}
