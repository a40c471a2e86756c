//! JSON-lines dataset files: one header record, then items, users, outfits.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Dataset, Item, Outfit, Split, User, WorldMap, WorldSpec};
use crate::captions::{AttributeSchema, StructuredCaption};
use crate::error::{Error, Result};
use crate::latent::LatentImage;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    block_sizes: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    World {
        format_version: u32,
        spec: WorldSpec,
        categories: Vec<String>,
        eta_max: f64,
        w: MatrixRecord,
    },
    Item {
        id: usize,
        caption: String,
        category: String,
        latent: String,
    },
    User {
        id: usize,
        preference: Vec<Vec<f64>>,
        history: Vec<usize>,
    },
    Outfit {
        id: usize,
        user: usize,
        items: Vec<usize>,
        style: String,
        held_out: usize,
        split: Split,
    },
}

fn f32_b64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

fn b64_f32(text: &str, expect: usize) -> Result<Vec<f64>> {
    let bytes = B64.decode(text).map_err(|e| Error::Format(format!("bad base64: {e}")))?;
    if bytes.len() != expect * 4 {
        return Err(Error::Format(format!("expected {} floats, got {} bytes", expect, bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect())
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let mut emit = |r: &Record| -> Result<()> {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(&Record::World {
        format_version: FORMAT_VERSION,
        spec: ds.spec.clone(),
        categories: ds.categories.clone(),
        eta_max: ds.eta_max,
        w: MatrixRecord {
            rows: ds.map.dim(),
            cols: ds.map.columns(),
            block_sizes: ds.map.block_sizes.clone(),
            data: f32_b64(&ds.map.matrix),
        },
    })?;
    for it in &ds.items {
        emit(&Record::Item {
            id: it.id,
            caption: it.caption.render(),
            category: it.category.clone(),
            latent: B64.encode(it.latent.to_f32_bytes()),
        })?;
    }
    for u in &ds.users {
        emit(&Record::User { id: u.id, preference: u.preference.clone(), history: u.history.clone() })?;
    }
    for o in &ds.outfits {
        emit(&Record::Outfit {
            id: o.id,
            user: o.user,
            items: o.items.clone(),
            style: o.style.clone(),
            held_out: o.held_out,
            split: o.split,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines().enumerate();
    let parse = |n: usize, line: &str| -> Result<Record> {
        serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))
    };
    let (n, first) = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
    let Record::World { format_version, spec, categories, eta_max, w } = parse(n, &first?)? else {
        return Err(Error::Format("first record must be the world header".into()));
    };
    if format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {format_version}")));
    }
    let schema = AttributeSchema::with_sizes(spec.vocab_sizes)?;
    let shape = spec.latent_shape;
    let map = WorldMap { shape, block_sizes: w.block_sizes, matrix: b64_f32(&w.data, w.rows * w.cols)? };
    if map.dim() != w.rows || map.columns() != w.cols {
        return Err(Error::Format("world matrix dimensions disagree with its header".into()));
    }
    let mut ds = Dataset { spec, schema, categories, map, eta_max, items: vec![], users: vec![], outfits: vec![] };
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse(n, &line)? {
            Record::World { .. } => return Err(Error::Format(format!("line {}: second header", n + 1))),
            Record::Item { id, caption, category, latent } => {
                let bytes = B64.decode(&latent).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
                ds.items.push(Item {
                    id,
                    caption: StructuredCaption::parse(&caption)?,
                    category,
                    latent: LatentImage::from_f32_bytes(shape, &bytes)?,
                });
            }
            Record::User { id, preference, history } => ds.users.push(User { id, preference, history }),
            Record::Outfit { id, user, items, style, held_out, split } => {
                ds.outfits.push(Outfit { id, user, items, style, held_out, split })
            }
        }
    }
    let ids_ok = ds.items.iter().enumerate().all(|(i, x)| x.id == i)
        && ds.users.iter().enumerate().all(|(i, x)| x.id == i)
        && ds.outfits.iter().enumerate().all(|(i, x)| x.id == i);
    if !ids_ok {
        return Err(Error::Format("record ids must be dense and in order".into()));
    }
    for o in &ds.outfits {
        if o.user >= ds.users.len() || o.held_out >= o.items.len() || o.items.iter().any(|&i| i >= ds.items.len()) {
            return Err(Error::Format(format!("outfit {} references missing records", o.id)));
        }
    }
    if ds.users.iter().flat_map(|u| &u.history).any(|&i| i >= ds.items.len()) {
        return Err(Error::Format("history references a missing item".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::gen_world;

    #[test]
    fn round_trip_is_byte_identical() {
        let spec = WorldSpec { n_items: 120, n_users: 10, n_outfits: 15, ..WorldSpec::default() };
        let ds = gen_world(&spec).unwrap();
        let mut a = Vec::new();
        write_dataset(&ds, &mut a).unwrap();
        let back = read_dataset(a.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut b = Vec::new();
        write_dataset(&back, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 1 + 120 + 10 + 15);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(matches!(read_dataset("".as_bytes()), Err(Error::Format(_))));
        assert!(matches!(read_dataset("{\"kind\":\"item\"}\n".as_bytes()), Err(Error::Format(_))));
        let ds = gen_world(&WorldSpec { n_items: 60, n_users: 3, n_outfits: 4, ..WorldSpec::default() }).unwrap();
        let mut a = Vec::new();
        write_dataset(&ds, &mut a).unwrap();
        let text = String::from_utf8(a).unwrap().replace("\"format_version\":1", "\"format_version\":9");
        assert!(matches!(read_dataset(text.as_bytes()), Err(Error::Format(_))));
    }
}
