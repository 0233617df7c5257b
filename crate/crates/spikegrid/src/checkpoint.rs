//! Versioned checkpoint container: the graph build parameters plus named
//! parameter blobs with shapes, enough to reconstruct the network exactly.

use crate::error::{Error, Result};
use crate::network::{GraphConfig, Network};
use crate::rng::RngStream;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io("writing checkpoint", e))
}

fn write_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io("writing checkpoint", e))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io("reading checkpoint", e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io("reading checkpoint", e))?;
    Ok(f32::from_le_bytes(b))
}

/// Serialize the network: build config header, then `name -> values` blobs
/// in visit order.
pub fn save(net: &Network, sink: &mut impl Write) -> Result<()> {
    sink.write_all(MAGIC).map_err(|e| Error::io("writing checkpoint", e))?;
    write_u32(sink, VERSION)?;
    let cfg = net.cfg;
    write_u32(sink, cfg.scale as u32)?;
    write_u32(sink, cfg.steps as u32)?;
    write_u32(sink, cfg.input_channels as u32)?;
    write_u32(sink, cfg.per_channel_lif as u32)?;
    write_f32(sink, cfg.surrogate_k)?;
    write_f32(sink, cfg.beta_init)?;
    write_f32(sink, cfg.thr_init)?;
    write_f32(sink, cfg.init_gain)?;
    let mut entries: Vec<(String, Vec<f32>)> = Vec::new();
    let mut net = net.clone();
    net.visit_params(|name, p| entries.push((name.to_string(), p.to_vec())));
    write_u32(sink, entries.len() as u32)?;
    for (name, values) in &entries {
        let bytes = name.as_bytes();
        write_u32(sink, bytes.len() as u32)?;
        sink.write_all(bytes).map_err(|e| Error::io("writing checkpoint", e))?;
        write_u32(sink, values.len() as u32)?;
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf).map_err(|e| Error::io("writing checkpoint", e))?;
    }
    Ok(())
}

/// Rebuild a network from a checkpoint.
pub fn load(source: &mut impl Read) -> Result<Network> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(|e| Error::io("reading checkpoint", e))?;
    if &magic != MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad checkpoint magic".into() });
    }
    let version = read_u32(source)?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let cfg = GraphConfig {
        scale: read_u32(source)? as usize,
        steps: read_u32(source)? as usize,
        input_channels: read_u32(source)? as usize,
        per_channel_lif: read_u32(source)? != 0,
        surrogate_k: read_f32(source)?,
        beta_init: read_f32(source)?,
        thr_init: read_f32(source)?,
        init_gain: read_f32(source)?,
    };
    let n_entries = read_u32(source)? as usize;
    let mut entries = std::collections::HashMap::new();
    for _ in 0..n_entries {
        let name_len = read_u32(source)? as usize;
        let mut name = vec![0u8; name_len];
        source.read_exact(&mut name).map_err(|e| Error::io("reading checkpoint", e))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Parse { offset: 0, message: "checkpoint name not utf-8".into() })?;
        let len = read_u32(source)? as usize;
        let mut buf = vec![0u8; len * 4];
        source.read_exact(&mut buf).map_err(|e| Error::io("reading checkpoint", e))?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.insert(name, values);
    }
    let mut rng = RngStream::new(0, 0);
    let mut net = Network::build_canonical(cfg, &mut rng)?;
    let mut missing = Vec::new();
    net.visit_params(|name, p| match entries.get(name) {
        Some(values) if values.len() == p.len() => p.copy_from_slice(values),
        Some(values) => missing.push(format!("{name}: expected {} values, found {}", p.len(), values.len())),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            message: format!("checkpoint incompatible with graph: {}", missing.join("; ")),
        });
    }
    Ok(net)
}
