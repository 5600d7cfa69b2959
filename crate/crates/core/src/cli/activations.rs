//! Activation-map inputs for `pool`: CSV with header
//! `map,label,token,c0..c{D-1}` (one row per token, tokens of a map
//! contiguous and in order) or a GGEM container holding one `[N², D]` or
//! `[N, N, D]` tensor per map plus an optional `labels` vector.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{decode_container, CONTAINER_MAGIC};
use crate::pooling::ActivationMaps;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledMaps {
    pub ids: Vec<u64>,
    pub labels: Vec<i64>,
    pub maps: Vec<ActivationMaps>,
}

pub fn read_activations(path: &Path) -> Result<LabelledMaps> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CONTAINER_MAGIC) {
        let tensors = decode_container(&bytes).map_err(|m| Error::format(path, m))?;
        maps_from_container(tensors).map_err(|m| Error::format(path, m))
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "neither a GGEM container nor UTF-8 CSV"))?;
        maps_from_csv(&text, &path.display().to_string())
    }
}

pub fn maps_from_container(tensors: Vec<(String, Tensor)>) -> std::result::Result<LabelledMaps, String> {
    let mut labels = None;
    let mut maps = Vec::new();
    for (name, t) in tensors {
        if name == "labels" {
            labels = Some(t);
            continue;
        }
        maps.push(ActivationMaps::new(t).map_err(|e| format!("tensor {name}: {e}"))?);
    }
    if maps.is_empty() {
        return Err("container holds no activation maps".into());
    }
    let labels = match labels {
        None => vec![0; maps.len()],
        Some(t) => {
            if t.len() != maps.len() {
                return Err(format!("{} labels for {} maps", t.len(), maps.len()));
            }
            t.data()
                .iter()
                .map(|&v| if v.fract() == 0.0 { Ok(v as i64) } else { Err(format!("label {v} is not an integer")) })
                .collect::<std::result::Result<_, _>>()?
        }
    };
    Ok(LabelledMaps {
        ids: (0..maps.len() as u64).collect(),
        labels,
        maps,
    })
}

pub fn maps_from_csv(text: &str, source: &str) -> Result<LabelledMaps> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let channels = header.len().saturating_sub(3);
    let expected = ["map", "label", "token"]
        .into_iter()
        .map(String::from)
        .chain((0..channels).map(|c| format!("c{c}")));
    if channels == 0 || header.iter().ne(expected) {
        return Err(err(1, "header must be map,label,token,c0,c1,...".into()));
    }

    struct Pending {
        id: u64,
        label: i64,
        values: Vec<f64>,
        tokens: usize,
        line: usize,
    }
    let mut out = LabelledMaps {
        ids: Vec::new(),
        labels: Vec::new(),
        maps: Vec::new(),
    };
    let finish = |p: Pending, out: &mut LabelledMaps| -> Result<()> {
        let t = Tensor::new(vec![p.tokens, channels], p.values).map_err(|e| err(p.line, e.to_string()))?;
        let maps = ActivationMaps::new(t).map_err(|e| err(p.line, format!("map {}: {e}", p.id)))?;
        out.ids.push(p.id);
        out.labels.push(p.label);
        out.maps.push(maps);
        Ok(())
    };
    let mut pending: Option<Pending> = None;
    for record in reader.records() {
        let record = record.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize, what: &str| -> Result<i64> {
            record[i].parse().map_err(|_| err(line, format!("bad {what} {:?}", &record[i])))
        };
        let (id, label, token) = (field(0, "map id")?, field(1, "label")?, field(2, "token index")?);
        if id < 0 || token < 0 {
            return Err(err(line, "map id and token must be non-negative".into()));
        }
        let id = id as u64;
        let values = record
            .iter()
            .skip(3)
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(line, format!("bad activation value {f:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        match pending.as_mut() {
            Some(p) if p.id == id => {
                if p.label != label {
                    return Err(err(line, format!("map {id} changes label")));
                }
                if token as usize != p.tokens {
                    return Err(err(line, format!("map {id}: expected token {}, got {token}", p.tokens)));
                }
                p.values.extend(values);
                p.tokens += 1;
                p.line = line;
            }
            _ => {
                if out.ids.contains(&id) {
                    return Err(err(line, format!("map {id} appears in two separate runs of rows")));
                }
                if let Some(done) = pending.take() {
                    finish(done, &mut out)?;
                }
                if token != 0 {
                    return Err(err(line, format!("map {id} must start at token 0")));
                }
                pending = Some(Pending {
                    id,
                    label,
                    values,
                    tokens: 1,
                    line,
                });
            }
        }
    }
    match pending {
        Some(p) => finish(p, &mut out)?,
        None => return Err(err(1, "no activation rows".into())),
    }
    Ok(out)
}
