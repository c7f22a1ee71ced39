//! Annotation and result formats: PASCAL VOC XML, COCO JSON, the detections
//! JSON exchanged with external detectors, and the synthetic dataset JSON.
//!
//! Parsing is strict and all-or-nothing: a structural error or a box that
//! breaks the box invariants (finite, ordered corners) fails the whole
//! document, and boxes are never repaired. Unknown fields are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::BBox;
use crate::synth::{Annotation, ClassId, Scene};

/// Bijective class-name <-> dense class-id table. Ids are assigned in
/// insertion order starting at 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassTable {
    names: Vec<String>,
    ids: BTreeMap<String, ClassId>,
}

impl ClassTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a table from distinct names; id `i` is the `i`-th name.
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut t = ClassTable::new();
        for n in names {
            let n = n.into();
            if t.id(&n).is_some() {
                return Err(Error::Schema(format!("duplicate class name {n:?}")));
            }
            t.intern(&n);
        }
        Ok(t)
    }

    /// Id of `name`, adding it when unseen.
    pub fn intern(&mut self, name: &str) -> ClassId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> Vec<ClassId> {
        (0..self.names.len()).collect()
    }

    /// Display name of `id`, falling back to the numeric id.
    pub fn display(&self, id: ClassId) -> String {
        self.name(id).map_or_else(|| id.to_string(), str::to_owned)
    }
}

impl Serialize for ClassTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.names.len()))?;
        for (id, name) in self.names.iter().enumerate() {
            m.serialize_entry(name, &id)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for ClassTable {
    /// Accepts a `{name: id}` map whose ids are exactly `0..n`.
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = BTreeMap::<String, ClassId>::deserialize(d)?;
        let mut names = vec![None; raw.len()];
        for (name, &id) in &raw {
            match names.get_mut(id) {
                Some(slot @ None) => *slot = Some(name.clone()),
                Some(Some(other)) => {
                    return Err(serde::de::Error::custom(format!(
                        "class id {id} used by both {other:?} and {name:?}"
                    )))
                }
                None => {
                    return Err(serde::de::Error::custom(format!(
                        "class ids must be dense 0..{}; {name:?} has id {id}",
                        raw.len()
                    )))
                }
            }
        }
        Ok(ClassTable {
            names: names.into_iter().map(|n| n.expect("every slot filled")).collect(),
            ids: raw,
        })
    }
}

/// Scenes keyed by scene id plus the class table their annotations refer to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationCorpus {
    pub classes: ClassTable,
    pub scenes: BTreeMap<String, Scene>,
}

impl AnnotationCorpus {
    /// Checks that every annotation's class is in the table and every box
    /// satisfies the box invariants.
    pub fn validate(&self) -> Result<()> {
        for (id, scene) in &self.scenes {
            for (i, a) in scene.annotations.iter().enumerate() {
                if self.classes.name(a.class_id).is_none() {
                    return Err(Error::Reference(format!(
                        "scene {id:?} annotation {i} has unknown class id {}",
                        a.class_id
                    )));
                }
                a.bbox
                    .validate()
                    .map_err(|e| Error::Validation(format!("scene {id:?} annotation {i}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Scene ids in iteration (sorted) order.
    pub fn scene_ids(&self) -> Vec<String> {
        self.scenes.keys().cloned().collect()
    }

    /// Position of every scene id in [`AnnotationCorpus::scene_ids`] order.
    pub fn scene_index(&self) -> BTreeMap<&str, usize> {
        self.scenes.keys().enumerate().map(|(i, k)| (k.as_str(), i)).collect()
    }

    /// Per-scene ground truth aligned with [`AnnotationCorpus::scene_ids`].
    pub fn ground_truth(&self) -> Vec<Vec<Annotation>> {
        self.scenes.values().map(|s| s.annotations.clone()).collect()
    }

    /// Wraps generated scenes with ids from [`synthetic_scene_id`]; `names[c]`
    /// names class `c`.
    pub fn from_scenes(names: &[String], scenes: &[Scene]) -> Result<Self> {
        let corpus = AnnotationCorpus {
            classes: ClassTable::from_names(names.iter().cloned())?,
            scenes: scenes
                .iter()
                .enumerate()
                .map(|(i, s)| (synthetic_scene_id(i), s.clone()))
                .collect(),
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

/// Scene id of the `i`-th generated scene; zero-padded so that id order and
/// index order agree.
pub fn synthetic_scene_id(i: usize) -> String {
    format!("scene-{i:06}")
}

fn check_gt_box(b: &BBox, width: f64, height: f64) -> std::result::Result<(), String> {
    b.validate().map_err(|e| e.to_string())?;
    if b.area() <= 0.0 {
        return Err("box has zero area".into());
    }
    if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > width || b.y2 > height {
        return Err(format!(
            "box ({}, {}, {}, {}) outside the {width}x{height} image",
            b.x1, b.y1, b.x2, b.y2
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PASCAL VOC XML

/// One parsed VOC annotation file, with class names not yet interned.
#[derive(Debug, Clone, PartialEq)]
pub struct VocDocument {
    /// File name without its extension, e.g. `000001` for `000001.jpg`.
    pub scene_id: String,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<VocObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocObject {
    pub name: String,
    pub bbox: BBox,
    pub difficult: bool,
}

impl VocDocument {
    /// Converts to a scene, interning class names into `classes`.
    pub fn into_scene(self, classes: &mut ClassTable) -> (String, Scene) {
        let annotations = self
            .objects
            .into_iter()
            .map(|o| Annotation {
                class_id: classes.intern(&o.name),
                bbox: o.bbox,
                difficult: o.difficult,
            })
            .collect();
        (
            self.scene_id,
            Scene {
                width: self.width,
                height: self.height,
                annotations,
                unlabeled: Vec::new(),
            },
        )
    }
}

fn byte_offset(text: &str, pos: roxmltree::TextPos) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(pos.row.saturating_sub(1) as usize)
        .map(str::len)
        .sum();
    let col = text[line_start.min(text.len())..]
        .char_indices()
        .nth(pos.col.saturating_sub(1) as usize)
        .map_or(text.len() - line_start.min(text.len()), |(i, _)| i);
    line_start + col
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|n| n.has_tag_name(name))
}

fn child_text<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Option<&'a str> {
    child(node, name).map(|n| n.text().unwrap_or("").trim())
}

fn parse_number(text: Option<&str>, what: &str) -> std::result::Result<f64, String> {
    let t = text.ok_or_else(|| format!("missing <{what}>"))?;
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("<{what}> is not a finite number: {t:?}"))
}

/// Parses one VOC annotation document without touching any class table.
pub fn parse_voc_document(doc: &[u8]) -> Result<VocDocument> {
    let text = std::str::from_utf8(doc).map_err(|e| Error::Xml {
        offset: e.valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    let xml = roxmltree::Document::parse(text).map_err(|e| Error::Xml {
        offset: byte_offset(text, e.pos()),
        message: e.to_string(),
    })?;
    let root = xml.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::Schema(format!(
            "root element is <{}>, expected <annotation>",
            root.tag_name().name()
        )));
    }
    let filename = child_text(root, "filename")
        .filter(|f| !f.is_empty())
        .ok_or_else(|| Error::Schema("missing <filename>".into()))?;
    let scene_id = Path::new(filename)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(filename)
        .to_owned();
    let size = child(root, "size").ok_or_else(|| Error::Schema("missing <size>".into()))?;
    let width = parse_number(child_text(size, "width"), "size/width").map_err(Error::Schema)?;
    let height = parse_number(child_text(size, "height"), "size/height").map_err(Error::Schema)?;
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Schema(format!(
            "image size must be positive, got {width}x{height}"
        )));
    }
    let mut objects = Vec::new();
    for (index, obj) in root.children().filter(|n| n.has_tag_name("object")).enumerate() {
        let invalid = |message: String| Error::InvalidObject { index, message };
        let name = child_text(obj, "name")
            .filter(|n| !n.is_empty())
            .ok_or_else(|| invalid("missing <name>".into()))?
            .to_owned();
        let bb = child(obj, "bndbox").ok_or_else(|| invalid("missing <bndbox>".into()))?;
        let mut coords = [0.0; 4];
        for (slot, tag) in coords.iter_mut().zip(["xmin", "ymin", "xmax", "ymax"]) {
            *slot = parse_number(child_text(bb, tag), &format!("bndbox/{tag}")).map_err(invalid)?;
        }
        let [x1, y1, x2, y2] = coords;
        if x1 > x2 {
            return Err(invalid(format!("xmin {x1} > xmax {x2}")));
        }
        if y1 > y2 {
            return Err(invalid(format!("ymin {y1} > ymax {y2}")));
        }
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| invalid(e.to_string()))?;
        let difficult = match child_text(obj, "difficult") {
            None | Some("0") | Some("") => false,
            Some("1") => true,
            Some(other) => return Err(invalid(format!("<difficult> must be 0 or 1, got {other:?}"))),
        };
        objects.push(VocObject { name, bbox, difficult });
    }
    Ok(VocDocument {
        scene_id,
        width,
        height,
        objects,
    })
}

/// Parses one VOC annotation document into a scene, interning its class
/// names into `classes`. The table is only modified when parsing succeeds.
pub fn parse_voc_xml(doc: &[u8], classes: &mut ClassTable) -> Result<(String, Scene)> {
    Ok(parse_voc_document(doc)?.into_scene(classes))
}

/// Loads every `*.xml` file of a directory. Files are parsed in file-name
/// order, so class ids follow first appearance in that order.
pub fn load_voc_dir(dir: &Path) -> Result<AnnotationCorpus> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")));
    paths.sort();
    let mut corpus = AnnotationCorpus::default();
    for p in paths {
        let doc = parse_voc_document(&std::fs::read(&p)?).map_err(|e| match e {
            Error::Xml { offset, message } => Error::Xml {
                offset,
                message: format!("{}: {message}", p.display()),
            },
            other => Error::Validation(format!("{}: {other}", p.display())),
        })?;
        let (id, scene) = doc.into_scene(&mut corpus.classes);
        if corpus.scenes.insert(id.clone(), scene).is_some() {
            return Err(Error::Validation(format!(
                "duplicate scene id {id:?} in {}",
                dir.display()
            )));
        }
    }
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// COCO JSON

#[derive(Deserialize)]
struct CocoFile {
    images: Option<Vec<CocoImage>>,
    annotations: Option<Vec<CocoAnnotation>>,
    categories: Option<Vec<CocoCategory>>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Parses a COCO annotation file. Scene ids are the decimal image ids;
/// category ids are remapped densely in ascending COCO-id order; `[x, y, w, h]`
/// boxes become corners and `iscrowd=1` marks an annotation as ignored.
pub fn parse_coco_json(doc: &[u8]) -> Result<AnnotationCorpus> {
    let raw: CocoFile = serde_json::from_slice(doc)?;
    let missing = |what: &str| Error::Schema(format!("missing `{what}` array"));
    let images = raw.images.ok_or_else(|| missing("images"))?;
    let annotations = raw.annotations.ok_or_else(|| missing("annotations"))?;
    let mut categories = raw.categories.ok_or_else(|| missing("categories"))?;

    categories.sort_by_key(|c| c.id);
    let mut classes = ClassTable::new();
    let mut category_map = BTreeMap::new();
    for c in &categories {
        if category_map.contains_key(&c.id) {
            return Err(Error::Schema(format!("duplicate category id {}", c.id)));
        }
        if classes.id(&c.name).is_some() {
            return Err(Error::Schema(format!("duplicate category name {:?}", c.name)));
        }
        category_map.insert(c.id, classes.intern(&c.name));
    }

    let mut scenes = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for img in &images {
        if !seen.insert(img.id) {
            return Err(Error::Validation(format!("duplicate image id {}", img.id)));
        }
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(Error::Validation(format!("image {} has non-positive size", img.id)));
        }
    }
    let mut by_image: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for (index, a) in annotations.iter().enumerate() {
        if !seen.contains(&a.image_id) {
            return Err(Error::Reference(format!(
                "annotation {index} refers to unknown image id {}",
                a.image_id
            )));
        }
        let class_id = *category_map.get(&a.category_id).ok_or_else(|| {
            Error::Reference(format!(
                "annotation {index} refers to unknown category id {}",
                a.category_id
            ))
        })?;
        let [x, y, w, h] = a.bbox;
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidObject {
                index,
                message: format!("negative bbox size {w}x{h}"),
            });
        }
        let bbox = BBox::new(x, y, x + w, y + h).map_err(|e| Error::InvalidObject {
            index,
            message: e.to_string(),
        })?;
        let difficult = match a.iscrowd {
            0 => false,
            1 => true,
            v => {
                return Err(Error::InvalidObject {
                    index,
                    message: format!("iscrowd must be 0 or 1, got {v}"),
                })
            }
        };
        by_image.entry(a.image_id).or_default().push(Annotation {
            class_id,
            bbox,
            difficult,
        });
    }
    for img in &images {
        scenes.insert(
            img.id.to_string(),
            Scene {
                width: img.width,
                height: img.height,
                annotations: by_image.remove(&img.id).unwrap_or_default(),
                unlabeled: Vec::new(),
            },
        );
    }
    Ok(AnnotationCorpus { classes, scenes })
}

// ---------------------------------------------------------------------------
// Detections JSON

/// One detection as exchanged with external tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene_id: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

impl DetectionRecord {
    fn validate(&self, index: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!(
                "detection {index}: score {} outside [0, 1]",
                self.score
            )));
        }
        let [x1, y1, x2, y2] = self.bbox;
        BBox::new(x1, y1, x2, y2).map_err(|e| Error::Validation(format!("detection {index}: {e}")))?;
        Ok(())
    }
}

/// Reads a detections array, validating every record.
pub fn read_detections_json(doc: &[u8]) -> Result<Vec<DetectionRecord>> {
    let records: Vec<DetectionRecord> = serde_json::from_slice(doc)?;
    for (i, r) in records.iter().enumerate() {
        r.validate(i)?;
    }
    Ok(records)
}

/// Serialises records in the given order; floats are written in shortest
/// round-trip form, so reading the output back yields identical values.
pub fn write_detections_json(records: &[DetectionRecord]) -> Result<String> {
    for (i, r) in records.iter().enumerate() {
        r.validate(i)?;
    }
    Ok(serde_json::to_string_pretty(records)?)
}

/// Records for scored detections whose `scene` indexes `scene_ids`.
pub fn detection_records(
    dets: &[Detection],
    scene_ids: &[String],
    classes: &ClassTable,
) -> Result<Vec<DetectionRecord>> {
    dets.iter()
        .map(|d| {
            let scene_id = scene_ids
                .get(d.scene)
                .ok_or_else(|| Error::Reference(format!("detection refers to scene index {}", d.scene)))?;
            Ok(DetectionRecord {
                scene_id: scene_id.clone(),
                class: classes.display(d.class_id),
                bbox: d.bbox.to_array(),
                score: d.confidence,
            })
        })
        .collect()
}

/// Resolves records against a corpus: scene ids must exist; class names the
/// corpus has never seen are added to `classes` (they have no ground truth).
pub fn resolve_detections(
    records: &[DetectionRecord],
    corpus: &AnnotationCorpus,
    classes: &mut ClassTable,
) -> Result<Vec<Detection>> {
    let index = corpus.scene_index();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let scene = *index
                .get(r.scene_id.as_str())
                .ok_or_else(|| Error::Reference(format!("detection {i} refers to unknown scene {:?}", r.scene_id)))?;
            let [x1, y1, x2, y2] = r.bbox;
            Ok(Detection {
                scene,
                class_id: classes.intern(&r.class),
                bbox: BBox::new(x1, y1, x2, y2)?,
                confidence: r.score,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic dataset JSON

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticFile {
    classes: ClassTable,
    scenes: Vec<SyntheticScene>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticScene {
    id: String,
    width: f64,
    height: f64,
    annotations: Vec<SyntheticAnnotation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticAnnotation {
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    difficult: bool,
}

/// Writes a corpus as synthetic dataset JSON (scenes in id order).
/// Unlabeled objects are not part of the format.
pub fn write_synthetic_json(corpus: &AnnotationCorpus) -> Result<String> {
    corpus.validate()?;
    let file = SyntheticFile {
        classes: corpus.classes.clone(),
        scenes: corpus
            .scenes
            .iter()
            .map(|(id, s)| SyntheticScene {
                id: id.clone(),
                width: s.width,
                height: s.height,
                annotations: s
                    .annotations
                    .iter()
                    .map(|a| SyntheticAnnotation {
                        class: corpus.classes.display(a.class_id),
                        bbox: a.bbox.to_array(),
                        difficult: a.difficult,
                    })
                    .collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Reads synthetic dataset JSON; every annotation class must be declared in
/// `classes` and scene ids must be unique.
pub fn read_synthetic_json(doc: &[u8]) -> Result<AnnotationCorpus> {
    let file: SyntheticFile = serde_json::from_slice(doc)?;
    let mut scenes = BTreeMap::new();
    for s in file.scenes {
        if !(s.width > 0.0 && s.height > 0.0) {
            return Err(Error::Validation(format!("scene {:?} has non-positive size", s.id)));
        }
        let mut annotations = Vec::with_capacity(s.annotations.len());
        for (index, a) in s.annotations.into_iter().enumerate() {
            let class_id = file.classes.id(&a.class).ok_or_else(|| {
                Error::Reference(format!(
                    "scene {:?} annotation {index} has undeclared class {:?}",
                    s.id, a.class
                ))
            })?;
            let [x1, y1, x2, y2] = a.bbox;
            let bbox = BBox { x1, y1, x2, y2 };
            check_gt_box(&bbox, s.width, s.height)
                .map_err(|m| Error::Validation(format!("scene {:?} annotation {index}: {m}", s.id)))?;
            annotations.push(Annotation {
                class_id,
                bbox,
                difficult: a.difficult,
            });
        }
        let scene = Scene {
            width: s.width,
            height: s.height,
            annotations,
            unlabeled: Vec::new(),
        };
        if scenes.insert(s.id.clone(), scene).is_some() {
            return Err(Error::Validation(format!("duplicate scene id {:?}", s.id)));
        }
    }
    Ok(AnnotationCorpus {
        classes: file.classes,
        scenes,
    })
}
