//! Line-delimited feature files: one JSON record per image with its patches,
//! adjacency and optional labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_bag, Annotation, Dataset, FeatureBag, LabeledBag, Patch, SupervisionLabels};

/// Binary label cell; files may use 0/1 or true/false.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
enum Bit {
    Int(u8),
    Bool(bool),
}

impl Bit {
    fn value(self) -> std::result::Result<bool, String> {
        match self {
            Bit::Int(0) | Bit::Bool(false) => Ok(false),
            Bit::Int(1) | Bit::Bool(true) => Ok(true),
            Bit::Int(v) => Err(format!("label value {v} is not 0 or 1")),
        }
    }
}

fn bits(v: Vec<Bit>) -> std::result::Result<Vec<bool>, String> {
    v.into_iter().map(Bit::value).collect()
}

fn ints(v: &[bool]) -> Vec<u8> {
    v.iter().map(|&b| b as u8).collect()
}

#[derive(Debug, Deserialize)]
struct LabelsIn {
    mode: String,
    #[serde(default)]
    weak: Option<Vec<Bit>>,
    #[serde(default)]
    strong: Option<Vec<Vec<Bit>>>,
    #[serde(default)]
    fg: Option<Vec<Bit>>,
    #[serde(default)]
    attributes: Option<Vec<String>>,
    #[serde(default)]
    annotated: Option<Vec<Bit>>,
}

#[derive(Debug, Deserialize)]
struct RecordIn {
    image_id: String,
    width: u32,
    height: u32,
    patches: Vec<Patch>,
    #[serde(default)]
    adjacency: Vec<[u32; 2]>,
    #[serde(default)]
    labels: Option<LabelsIn>,
}

#[derive(Debug, Serialize)]
struct LabelsOut<'a> {
    mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    weak: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    strong: Option<Vec<Vec<u8>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fg: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attributes: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotated: Option<Vec<u8>>,
}

#[derive(Debug, Serialize)]
struct RecordOut<'a> {
    #[serde(flatten)]
    bag: &'a FeatureBag,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<LabelsOut<'a>>,
}

fn convert_labels(raw: LabelsIn) -> std::result::Result<(SupervisionLabels, Option<Vec<String>>), String> {
    let annotation = match raw.mode.as_str() {
        "none" => Annotation::None,
        "weak" => Annotation::Weak {
            weak: bits(raw.weak.ok_or("mode weak without 'weak' labels")?)?,
        },
        "strong" => Annotation::Strong {
            strong: raw
                .strong
                .ok_or("mode strong without 'strong' labels")?
                .into_iter()
                .map(bits)
                .collect::<std::result::Result<_, _>>()?,
        },
        other => return Err(format!("unknown label mode '{other}'")),
    };
    let labels = SupervisionLabels {
        annotation,
        annotated: raw.annotated.map(bits).transpose()?,
        foreground: raw.fg.map(bits).transpose()?,
    };
    Ok((labels, raw.attributes))
}

fn label_width(labels: &SupervisionLabels) -> Option<usize> {
    match &labels.annotation {
        Annotation::None => labels.annotated.as_ref().map(Vec::len),
        Annotation::Weak { weak } => Some(weak.len()),
        Annotation::Strong { strong } => strong.first().map(Vec::len),
    }
}

/// Default attribute names when a file does not name its label columns.
pub fn default_attribute_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("attr-{i}")).collect()
}

/// Loads a feature file. Every bag is validated; labels are checked against
/// the file's attribute vocabulary (named by an `attributes` list in the
/// labels, or `attr-i` by position).
pub fn load_feature_bags(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: shown.clone(),
        line,
        message,
    };

    let mut attributes: Option<Vec<String>> = None;
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let bag = FeatureBag {
            image_id: rec.image_id,
            width: rec.width,
            height: rec.height,
            patches: rec.patches,
            adjacency: rec.adjacency,
        };
        let report = validate_bag(&bag);
        if !report.is_valid() {
            let detail: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
            return Err(parse_err(
                lineno,
                format!("image {}: {}", bag.image_id, detail.join("; ")),
            ));
        }
        let labels = match rec.labels {
            None => SupervisionLabels::none(),
            Some(raw) => {
                let (labels, names) =
                    convert_labels(raw).map_err(|m| parse_err(lineno, format!("image {}: {m}", bag.image_id)))?;
                let names = names.or_else(|| label_width(&labels).map(default_attribute_names));
                match (&attributes, names) {
                    (None, Some(n)) => attributes = Some(n),
                    (Some(a), Some(n)) if *a != n => {
                        return Err(parse_err(
                            lineno,
                            format!("image {}: attribute names differ from earlier records", bag.image_id),
                        ))
                    }
                    _ => {}
                }
                labels
            }
        };
        items.push((lineno, LabeledBag { bag, labels }));
    }

    let attributes = attributes.unwrap_or_default();
    for (lineno, item) in &items {
        item.labels
            .validate(attributes.len(), item.bag.n_patches())
            .map_err(|e| parse_err(*lineno, format!("image {}: {e}", item.bag.image_id)))?;
    }
    Ok(Dataset {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        attributes,
        items: items.into_iter().map(|(_, it)| it).collect(),
    })
}

/// Writes a dataset in the format read by [`load_feature_bags`].
pub fn save_feature_bags(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let named = dataset.attributes != default_attribute_names(dataset.attributes.len());
    for item in &dataset.items {
        let l = &item.labels;
        let has_labels = !matches!(l.annotation, Annotation::None) || l.annotated.is_some() || l.foreground.is_some();
        let labels = has_labels.then(|| {
            let (mode, weak, strong) = match &l.annotation {
                Annotation::None => ("none", None, None),
                Annotation::Weak { weak } => ("weak", Some(ints(weak)), None),
                Annotation::Strong { strong } => ("strong", None, Some(strong.iter().map(|r| ints(r)).collect())),
            };
            LabelsOut {
                mode,
                weak,
                strong,
                fg: l.foreground.as_deref().map(ints),
                attributes: named.then_some(dataset.attributes.as_slice()),
                annotated: l.annotated.as_deref().map(ints),
            }
        });
        serde_json::to_writer(
            &mut out,
            &RecordOut {
                bag: &item.bag,
                labels,
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
