use serde::{Deserialize, Serialize};

use super::density::{mixture_of, style_matrix, Component, Gaussian2, Mixture};
use super::ConceptError;
use crate::numcore::{normal, Rng};

/// Per-axis spread of every instance component in the default map.
pub const INSTANCE_SIGMA: f64 = 0.15;
/// Spread of the memorized point in the default map.
pub const MEMO_JITTER: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ConceptKind {
    /// Gaussian mixture. `frame` is the family centre that style transforms act about.
    Instance {
        components: Vec<Component>,
        frame: [f64; 2],
    },
    /// Area-preserving transform `R(angle) diag(sqrt(a), 1/sqrt(a))`.
    Style {
        angle_deg: f64,
        anisotropy: f64,
    },
    Memorized {
        point: [f64; 2],
        jitter: f64,
    },
    Composition {
        subject: String,
        style: String,
    },
}

/// Unknown keys are rejected by the flattened kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ConceptKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Relation {
    pub target: String,
    pub anchor: String,
    #[serde(default)]
    pub surrounding: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptMap {
    pub concepts: Vec<ConceptSpec>,
    pub relations: Vec<Relation>,
    /// Subjects that style prompts are drawn over.
    #[serde(default)]
    pub style_subjects: Vec<String>,
}

fn on_circle(centre: [f64; 2], angle_deg: f64) -> [f64; 2] {
    let (s, c) = angle_deg.to_radians().sin_cos();
    [centre[0] + c, centre[1] + s]
}

fn family(name: &str, centre: [f64; 2], members: &[(&str, f64, f64)]) -> Vec<ConceptSpec> {
    let mut out = vec![ConceptSpec {
        name: name.into(),
        kind: ConceptKind::Instance {
            components: members
                .iter()
                .map(|&(_, ang, w)| Component::isotropic(w, on_circle(centre, ang), INSTANCE_SIGMA))
                .collect(),
            frame: centre,
        },
    }];
    for &(m, ang, _) in members {
        out.push(ConceptSpec {
            name: m.into(),
            kind: ConceptKind::Instance {
                components: vec![Component::isotropic(1.0, on_circle(centre, ang), INSTANCE_SIGMA)],
                frame: centre,
            },
        });
    }
    out
}

/// The built-in concept geometry.
///
/// Two four-member families on unit circles (cats about the origin, dogs about
/// `(3, 0)`), each with a rare target member of weight 0.1; a broad "poster"
/// concept with a memorized point inside it; three styles; one composition.
pub fn default_concept_map() -> ConceptMap {
    let mut concepts = family(
        "cat",
        [0.0, 0.0],
        &[("tabby", 0.0, 0.3), ("grumpy", 90.0, 0.1), ("siamese", 180.0, 0.3), ("persian", 270.0, 0.3)],
    );
    concepts.extend(family(
        "dog",
        [3.0, 0.0],
        &[("corgi", 45.0, 0.1), ("husky", 135.0, 0.3), ("poodle", 225.0, 0.3), ("beagle", 315.0, 0.3)],
    ));
    concepts.push(ConceptSpec {
        name: "poster".into(),
        kind: ConceptKind::Instance {
            components: vec![Component::isotropic(1.0, [0.0, -2.5], 0.3)],
            frame: [0.0, -2.5],
        },
    });
    concepts.push(ConceptSpec {
        name: "memo".into(),
        kind: ConceptKind::Memorized { point: [0.45, -2.5], jitter: MEMO_JITTER },
    });
    for (name, angle_deg, anisotropy) in [("plain", 0.0, 1.0), ("vangogh", 45.0, 4.0), ("monet", -30.0, 2.0)] {
        concepts.push(ConceptSpec { name: name.into(), kind: ConceptKind::Style { angle_deg, anisotropy } });
    }
    concepts.push(ConceptSpec {
        name: "dog_vangogh".into(),
        kind: ConceptKind::Composition { subject: "dog".into(), style: "vangogh".into() },
    });
    let rel = |t: &str, a: &str, s: &[&str]| Relation {
        target: t.into(),
        anchor: a.into(),
        surrounding: s.iter().map(|x| x.to_string()).collect(),
    };
    ConceptMap {
        concepts,
        relations: vec![
            rel("grumpy", "cat", &["tabby", "siamese", "persian"]),
            rel("corgi", "dog", &["husky", "poodle", "beagle"]),
            rel("memo", "poster", &[]),
            rel("vangogh", "plain", &["monet"]),
            rel("dog_vangogh", "dog", &[]),
        ],
        style_subjects: vec!["cat".into(), "dog".into()],
    }
}

impl ConceptMap {
    pub fn get(&self, name: &str) -> Result<&ConceptSpec, ConceptError> {
        self.concepts.iter().find(|c| c.name == name).ok_or_else(|| ConceptError::UnknownConcept(name.into()))
    }

    pub fn relation(&self, target: &str) -> Result<&Relation, ConceptError> {
        self.relations
            .iter()
            .find(|r| r.target == target)
            .ok_or_else(|| ConceptError::Invalid(format!("no anchor relation for {target}")))
    }

    pub fn is_style(&self, name: &str) -> bool {
        matches!(self.get(name).map(|c| &c.kind), Ok(ConceptKind::Style { .. }))
    }

    /// Checks weights, covariances and relation structure.
    pub fn validate(&self) -> Result<(), ConceptError> {
        for (i, c) in self.concepts.iter().enumerate() {
            if self.concepts[..i].iter().any(|d| d.name == c.name) {
                return Err(ConceptError::Invalid(format!("duplicate concept {}", c.name)));
            }
            match &c.kind {
                ConceptKind::Instance { components, .. } => {
                    mixture_of(components)?;
                }
                ConceptKind::Style { anisotropy, .. } => {
                    if *anisotropy <= 0.0 {
                        return Err(ConceptError::Invalid(format!("{}: anisotropy must be positive", c.name)));
                    }
                }
                ConceptKind::Memorized { jitter, .. } => {
                    if *jitter < 0.0 {
                        return Err(ConceptError::Invalid(format!("{}: negative jitter", c.name)));
                    }
                }
                ConceptKind::Composition { subject, style } => {
                    if !matches!(self.get(subject)?.kind, ConceptKind::Instance { .. }) || !self.is_style(style) {
                        return Err(ConceptError::Invalid(format!(
                            "{}: composition needs an instance subject and a style",
                            c.name
                        )));
                    }
                }
            }
        }
        for (i, r) in self.relations.iter().enumerate() {
            self.get(&r.target)?;
            self.get(&r.anchor)?;
            if r.anchor == r.target {
                return Err(ConceptError::Invalid(format!("{}: anchor equals target", r.target)));
            }
            if self.relations[..i].iter().any(|q| q.target == r.target) {
                return Err(ConceptError::Invalid(format!("{}: more than one anchor", r.target)));
            }
            for s in &r.surrounding {
                self.get(s)?;
                if *s == r.target {
                    return Err(ConceptError::Invalid(format!("{}: target listed as surrounding", r.target)));
                }
            }
        }
        for s in &self.style_subjects {
            self.get(s)?;
        }
        Ok(())
    }

    fn style_of(&self, style: Option<&str>) -> Result<(f64, f64), ConceptError> {
        match style {
            None => Ok((0.0, 1.0)),
            Some(s) => match &self.get(s)?.kind {
                ConceptKind::Style { angle_deg, anisotropy } => Ok((*angle_deg, *anisotropy)),
                _ => Err(ConceptError::Invalid(format!("{s} is not a style"))),
            },
        }
    }

    /// Analytic density of `subject` rendered in `style` (`None` = unstyled).
    pub fn density(&self, subject: &str, style: Option<&str>) -> Result<Mixture, ConceptError> {
        let (ang, an) = self.style_of(style)?;
        match &self.get(subject)?.kind {
            ConceptKind::Instance { components, frame } => {
                let m = mixture_of(components)?;
                if an == 1.0 && ang == 0.0 {
                    Ok(m)
                } else {
                    m.transformed(&style_matrix(ang, an), *frame)
                }
            }
            ConceptKind::Memorized { point, jitter } => {
                if style.is_some() {
                    return Err(ConceptError::Invalid(format!("{subject} cannot take a style")));
                }
                if *jitter <= 0.0 {
                    return Err(ConceptError::Degenerate(format!("{subject} is a point mass")));
                }
                Ok(Mixture::single(Gaussian2::isotropic(*point, *jitter)?))
            }
            ConceptKind::Composition { subject: s, style: st } => {
                if style.is_some() {
                    return Err(ConceptError::Invalid(format!("{subject} already carries a style")));
                }
                self.density(s, Some(st))
            }
            ConceptKind::Style { .. } => {
                Err(ConceptError::Invalid(format!("{subject} is a style and has no density without a subject")))
            }
        }
    }

    /// I.i.d. draws of `subject` in `style`.
    pub fn sample_truth(
        &self,
        subject: &str,
        style: Option<&str>,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Vec<[f64; 2]>, ConceptError> {
        if let ConceptKind::Memorized { point, jitter } = &self.get(subject)?.kind {
            if style.is_some() {
                return Err(ConceptError::Invalid(format!("{subject} cannot take a style")));
            }
            return Ok((0..n)
                .map(|_| {
                    let (a, b) = (normal(rng), normal(rng));
                    [point[0] + jitter * a, point[1] + jitter * b]
                })
                .collect());
        }
        let d = self.density(subject, style)?;
        Ok((0..n).map(|_| d.sample(rng)).collect())
    }

    /// The memorized point and jitter of a memorized concept.
    pub fn memorized_point(&self, name: &str) -> Result<([f64; 2], f64), ConceptError> {
        match &self.get(name)?.kind {
            ConceptKind::Memorized { point, jitter } => Ok((*point, *jitter)),
            _ => Err(ConceptError::Invalid(format!("{name} is not a memorized concept"))),
        }
    }
}
