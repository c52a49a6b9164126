//! Annotation sessions: current contours plus an append-only edit log.

use boxsnake::data_io::{Dataset, ImageEntry, InstanceAnnotation, Split};
use boxsnake::geometry::{BBox, Contour, GeometryError, MultiPolygon, Point};
use serde::{Deserialize, Serialize};

/// Vertices as `[x, y]` pairs in image pixels.
pub type Vertices = Vec<[f64; 2]>;

pub fn to_pairs(c: &Contour) -> Vertices {
    c.vertices().iter().map(|p| [p.x, p.y]).collect()
}

pub fn to_points(v: &[[f64; 2]]) -> Vec<Point> {
    v.iter().map(|&[x, y]| Point::new(x, y)).collect()
}

/// One entry of a session's history. Entries carry their results, so a
/// history can be replayed without a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Edit {
    #[serde(rename_all = "camelCase")]
    Predict { instance_id: String, category: String, bbox: [f64; 4], vertices: Vertices },
    #[serde(rename_all = "camelCase")]
    Refine { instance_id: String, pinned: Vec<bool>, vertices: Vertices },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionInstance {
    pub id: String,
    pub category: String,
    pub bbox: [f64; 4],
    pub vertices: Vertices,
    /// Flags sent with the last refinement; all clear after a prediction.
    pub pinned: Vec<bool>,
}

impl SessionInstance {
    pub fn k(&self) -> usize {
        self.vertices.len()
    }

    pub fn bbox(&self) -> Result<BBox, GeometryError> {
        let [x0, y0, x1, y1] = self.bbox;
        BBox::new(x0, y0, x1, y1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Session {
    pub session_id: String,
    pub image_id: u64,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<SessionInstance>,
    pub history: Vec<Edit>,
}

impl Session {
    pub fn new(session_id: String, image_id: u64, width: usize, height: usize) -> Self {
        Session { session_id, image_id, width, height, instances: Vec::new(), history: Vec::new() }
    }

    pub fn instance(&self, id: &str) -> Option<&SessionInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Id the next prediction in this session receives.
    pub fn next_instance_id(&self) -> String {
        let n = self.history.iter().filter(|e| matches!(e, Edit::Predict { .. })).count();
        format!("{}-i{}", self.session_id, n + 1)
    }

    /// Applies `edit` to the current state and appends it to the history.
    /// Refinements of unknown instances are ignored.
    pub fn apply(&mut self, edit: Edit) {
        match &edit {
            Edit::Predict { instance_id, category, bbox, vertices } => self.instances.push(SessionInstance {
                id: instance_id.clone(),
                category: category.clone(),
                bbox: *bbox,
                vertices: vertices.clone(),
                pinned: vec![false; vertices.len()],
            }),
            Edit::Refine { instance_id, pinned, vertices } => {
                if let Some(inst) = self.instances.iter_mut().find(|i| &i.id == instance_id) {
                    inst.vertices = vertices.clone();
                    inst.pinned = pinned.clone();
                }
            }
        }
        self.history.push(edit);
    }

    /// Rebuilds a session from its history alone.
    pub fn replay(&self) -> Session {
        let mut s = Session::new(self.session_id.clone(), self.image_id, self.width, self.height);
        for e in &self.history {
            s.apply(e.clone());
        }
        s
    }

    /// Manifest of every current contour, clamped to the image and rounded
    /// to 0.01 px.
    pub fn export(&self) -> Result<Dataset, GeometryError> {
        let mut categories: Vec<String> = self.instances.iter().map(|i| i.category.clone()).collect();
        categories.sort();
        categories.dedup();
        let instances = self
            .instances
            .iter()
            .enumerate()
            .map(|(n, inst)| {
                let (w, h) = (self.width as f64, self.height as f64);
                let pts = inst.vertices.iter().map(|&[x, y]| Point::new(round2(x.clamp(0.0, w)), round2(y.clamp(0.0, h)))).collect();
                let polygons = MultiPolygon::single(Contour::new(pts)?);
                let bbox = polygons.bbox()?;
                Ok(InstanceAnnotation { id: n as u64 + 1, image_id: self.image_id, category: inst.category.clone(), polygons, bbox })
            })
            .collect::<Result<_, GeometryError>>()?;
        Ok(Dataset {
            images: vec![ImageEntry {
                id: self.image_id,
                file: format!("{}.png", self.image_id),
                width: self.width,
                height: self.height,
            }],
            categories,
            instances,
            split: Split::default(),
        })
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}
