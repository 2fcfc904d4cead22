//! Pascal-VOC style layout: `images/`, `annotations/*.xml`, `splits/{train,test}.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{make_pair, Dataset, Scene, Split};
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::imageio::{read_image, write_image};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct VocObject {
    pub name: String,
    pub bbox: BBox,
    pub difficult: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotation {
    pub filename: Option<String>,
    pub size: Option<(usize, usize)>,
    pub objects: Vec<VocObject>,
}

/// Bookkeeping from [`load_voc_dataset`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    /// Image ids listed in the split file without an annotation.
    pub missing_annotations: Vec<String>,
    /// Objects whose class is not in the class table.
    pub unknown_class: usize,
    /// Boxes removed by clipping or the minimum-side rule.
    pub dropped_boxes: usize,
}

fn ds_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Dataset(format!("{}: {msg}", path.display()))
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn text_of(node: roxmltree::Node, name: &str) -> Option<String> {
    child(node, name).and_then(|c| c.text()).map(|t| t.trim().to_string())
}

fn num(node: roxmltree::Node, name: &str, path: &Path) -> Result<f64> {
    let t = text_of(node, name).ok_or_else(|| ds_err(path, format!("missing <{name}>")))?;
    t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| ds_err(path, format!("<{name}> is not a number: {t:?}")))
}

/// Axis-aligned hull of a rotated box given by centre, size and angle in radians.
fn rotated_hull(cx: f64, cy: f64, w: f64, h: f64, angle: f64) -> (f64, f64, f64, f64) {
    let (s, c) = angle.sin_cos();
    let ex = (w * c).abs() / 2.0 + (h * s).abs() / 2.0;
    let ey = (w * s).abs() / 2.0 + (h * c).abs() / 2.0;
    (cx - ex, cy - ey, cx + ex, cy + ey)
}

/// Parses one annotation file; accepts VOC `bndbox`, rotated `robndbox`
/// and HRSC-style `HRSC_Object` records. Empty input means no objects.
pub fn parse_annotation(xml: &str, path: &Path) -> Result<Annotation> {
    if xml.trim().is_empty() {
        return Ok(Annotation::default());
    }
    let doc = roxmltree::Document::parse(xml).map_err(|e| ds_err(path, e))?;
    let root = doc.root_element();
    let mut ann = Annotation { filename: text_of(root, "filename"), ..Annotation::default() };
    if let Some(size) = child(root, "size") {
        ann.size = Some((num(size, "width", path)? as usize, num(size, "height", path)? as usize));
    } else if child(root, "Img_SizeWidth").is_some() {
        ann.size = Some((num(root, "Img_SizeWidth", path)? as usize, num(root, "Img_SizeHeight", path)? as usize));
    }

    let hrsc = child(root, "HRSC_Objects").into_iter().flat_map(|n| n.children().filter(|c| c.has_tag_name("HRSC_Object")));
    for obj in root.children().filter(|c| c.has_tag_name("object")).chain(hrsc) {
        let name = text_of(obj, "name").or_else(|| text_of(obj, "Class_ID")).unwrap_or_else(|| "ship".into());
        let difficult = text_of(obj, "difficult").is_some_and(|d| d == "1");
        let (x0, y0, x1, y1) = if let Some(b) = child(obj, "bndbox") {
            (num(b, "xmin", path)?, num(b, "ymin", path)?, num(b, "xmax", path)?, num(b, "ymax", path)?)
        } else if let Some(b) = child(obj, "robndbox") {
            rotated_hull(num(b, "cx", path)?, num(b, "cy", path)?, num(b, "w", path)?, num(b, "h", path)?, num(b, "angle", path)?)
        } else if child(obj, "box_xmin").is_some() {
            (num(obj, "box_xmin", path)?, num(obj, "box_ymin", path)?, num(obj, "box_xmax", path)?, num(obj, "box_ymax", path)?)
        } else {
            return Err(ds_err(path, format!("object {name:?} has no box")));
        };
        let bbox = BBox::new(x0, y0, x1, y1).map_err(|e| ds_err(path, e))?;
        ann.objects.push(VocObject { name, bbox, difficult });
    }
    Ok(ann)
}

fn annotation_xml(scene: &Scene, class_name: &str) -> String {
    let (_, h, w) = scene.image.chw().expect("scene images are CHW");
    let mut s = String::new();
    let _ = writeln!(s, "<annotation>\n  <filename>{}.png</filename>", scene.id);
    let _ = writeln!(s, "  <size><width>{w}</width><height>{h}</height><depth>3</depth></size>");
    for b in &scene.boxes {
        let _ = writeln!(
            s,
            "  <object><name>{class_name}</name><difficult>0</difficult><bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox></object>",
            b.xmin, b.ymin, b.xmax, b.ymax
        );
    }
    s.push_str("</annotation>\n");
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes scenes of one split as PNG + XML and the split list.
pub fn write_voc(root: &Path, scenes: &[Scene], split: Split) -> Result<()> {
    let mut list = String::new();
    for scene in scenes {
        write_image(&scene.image, &root.join("images").join(format!("{}.png", scene.id)))?;
        write_file(&root.join("annotations").join(format!("{}.xml", scene.id)), &annotation_xml(scene, "ship"))?;
        list.push_str(&scene.id);
        list.push('\n');
    }
    write_file(&root.join("splits").join(format!("{}.txt", split.as_str())), &list)
}

fn find_image(root: &Path, id: &str, hint: Option<&str>) -> Option<PathBuf> {
    let dir = root.join("images");
    hint.map(|h| dir.join(h))
        .into_iter()
        .chain(["png", "jpg", "jpeg", "bmp"].iter().map(|ext| dir.join(format!("{id}.{ext}"))))
        .find(|p| p.is_file())
}

/// Loads one split, pairing every image into HR `hr_size` and LR `hr_size / alpha`.
///
/// Ids without an annotation are skipped and reported; a listed image that
/// is missing or unreadable is an error naming the file.
pub fn load_voc_dataset<T: Scalar>(
    root: &Path,
    split: Split,
    alpha: usize,
    hr_size: usize,
    class_names: &[String],
) -> Result<(Dataset<T>, LoadReport)> {
    let list_path = root.join("splits").join(format!("{}.txt", split.as_str()));
    let list = std::fs::read_to_string(&list_path).map_err(|e| Error::io(&list_path, e))?;
    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    for id in list.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let ann_path = root.join("annotations").join(format!("{id}.xml"));
        if !ann_path.is_file() {
            log::warn!("{id}: no annotation, skipped");
            report.missing_annotations.push(id.to_string());
            continue;
        }
        let xml = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let ann = parse_annotation(&xml, &ann_path)?;
        let img_path = find_image(root, id, ann.filename.as_deref())
            .ok_or_else(|| Error::Dataset(format!("{}: image for {id} not found", root.join("images").display())))?;
        let original = read_image::<T>(&img_path)?;
        let (_, h, w) = original.chw()?;
        let mut boxes = Vec::new();
        let mut classes = Vec::new();
        for obj in &ann.objects {
            let Some(cls) = class_names.iter().position(|c| c == &obj.name) else {
                report.unknown_class += 1;
                continue;
            };
            match obj.bbox.clip(w as f64, h as f64) {
                Some(b) => {
                    boxes.push(b);
                    classes.push(cls);
                }
                None => report.dropped_boxes += 1,
            }
        }
        let paired = make_pair(id, &original, &boxes, &classes, alpha, hr_size)?;
        report.dropped_boxes += paired.dropped_boxes;
        samples.push(paired.sample);
    }
    let ds = Dataset { split, class_names: class_names.to_vec(), samples };
    ds.validate(alpha)?;
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scenes, SynthConfig};

    #[test]
    fn parses_all_box_flavours() {
        let xml = r#"<annotation><size><width>100</width><height>80</height></size>
            <object><name>ship</name><bndbox><xmin>1</xmin><ymin>2</ymin><xmax>30</xmax><ymax>40</ymax></bndbox></object>
            <object><name>ship</name><robndbox><cx>50</cx><cy>40</cy><w>20</w><h>10</h><angle>0</angle></robndbox></object>
            </annotation>"#;
        let a = parse_annotation(xml, Path::new("a.xml")).unwrap();
        assert_eq!(a.size, Some((100, 80)));
        assert_eq!(a.objects[0].bbox, BBox::new(1.0, 2.0, 30.0, 40.0).unwrap());
        assert_eq!(a.objects[1].bbox, BBox::new(40.0, 35.0, 60.0, 45.0).unwrap());
        let h = r#"<HRSC_Image><Img_SizeWidth>10</Img_SizeWidth><Img_SizeHeight>10</Img_SizeHeight><HRSC_Objects>
            <HRSC_Object><Class_ID>100000001</Class_ID><box_xmin>1</box_xmin><box_ymin>1</box_ymin><box_xmax>5</box_xmax><box_ymax>6</box_ymax></HRSC_Object>
            </HRSC_Objects></HRSC_Image>"#;
        let a = parse_annotation(h, Path::new("h.xml")).unwrap();
        assert_eq!(a.objects.len(), 1);
        assert_eq!(a.objects[0].name, "100000001");
        assert!(parse_annotation("  ", Path::new("e.xml")).unwrap().objects.is_empty());
        let err = parse_annotation("<annotation><object><name>x</name></object></annotation>", Path::new("bad.xml"));
        assert!(err.unwrap_err().to_string().contains("bad.xml"));
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { train_count: 3, canvas: 64, length_min: 16.0, length_max: 28.0, beam_min: 0.3, beam_max: 0.4, ..SynthConfig::default() };
        let scenes = synth_scenes(&cfg, Split::Train).unwrap();
        write_voc(dir.path(), &scenes, Split::Train).unwrap();
        std::fs::write(dir.path().join("splits/train.txt"), "train_00000\ntrain_00001\ntrain_00002\nghost\n").unwrap();
        let (ds, report) = load_voc_dataset::<f32>(dir.path(), Split::Train, 2, 32, &["ship".into()]).unwrap();
        assert_eq!(report.missing_annotations, vec!["ghost".to_string()]);
        let direct = crate::data::synth_dataset::<f32>(&cfg, Split::Train, 2).unwrap();
        assert_eq!(ds.samples, direct.samples);
    }

    #[test]
    fn unreadable_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        write_file(&dir.path().join("splits/test.txt"), "a\n").unwrap();
        write_file(&dir.path().join("annotations/a.xml"), "").unwrap();
        write_file(&dir.path().join("images/a.png"), "not a png").unwrap();
        let err = load_voc_dataset::<f32>(dir.path(), Split::Test, 2, 32, &["ship".into()]).unwrap_err();
        assert!(err.to_string().contains("a.png"), "{err}");
    }
}
