//! Checkpoint files: the 4-byte magic `CEF1`, a little-endian `u32` header
//! length, a UTF-8 text header (network spec, iteration, block table), then
//! the raw little-endian `f32` blocks in header order.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

use super::network::Network;
use super::spec::NetworkSpec;

pub const MAGIC: &[u8; 4] = b"CEF1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub iteration: u64,
    pub blocks: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, iteration: u64) -> Self {
        Self {
            spec: net.spec().clone(),
            iteration,
            blocks: net.blocks(),
        }
    }

    /// Instantiates the stored network.
    pub fn build_network(&self) -> Result<Network<f32>> {
        let mut net = Network::new(self.spec.clone(), 0)?;
        net.load_blocks(&self.blocks)?;
        Ok(net)
    }

    /// Copies every parameter and running statistic into `net`, whose spec
    /// must be identical.
    pub fn load_into(&self, net: &mut Network<f32>) -> Result<()> {
        if net.spec() != &self.spec {
            return Err(Error::SpecMismatch(format!(
                "checkpoint holds {} but the network is {}",
                self.spec.name,
                net.spec().name
            )));
        }
        net.load_blocks(&self.blocks)
    }

    fn header(&self) -> String {
        let mut h = self.spec.to_text();
        h.push_str(&format!("iteration {}\n", self.iteration));
        for (name, v) in &self.blocks {
            h.push_str(&format!("block {name} {}\n", v.len()));
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let total: usize = self.blocks.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, v) in &self.blocks {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::BadMagic)?;
        if &magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header = String::from_utf8(header).map_err(|_| Error::BadMagic)?;
        let spec = NetworkSpec::from_text(&header)?;
        let mut iteration = None;
        let mut table = Vec::new();
        for line in header.lines() {
            if let Some(rest) = line.strip_prefix("iteration ") {
                iteration = Some(rest.trim().parse().map_err(|_| Error::BadMagic)?);
            } else if let Some(rest) = line.strip_prefix("block ") {
                let (name, n) = rest.rsplit_once(' ').ok_or(Error::BadMagic)?;
                table.push((name.to_string(), n.parse::<usize>().map_err(|_| Error::BadMagic)?));
            }
        }
        let iteration = iteration.ok_or(Error::BadMagic)?;
        let mut blocks = Vec::with_capacity(table.len());
        for (name, n) in table {
            let mut raw = vec![0u8; 4 * n];
            r.read_exact(&mut raw)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push((name, values));
        }
        let ckpt = Self {
            spec,
            iteration,
            blocks,
        };
        // block table must agree with the spec-derived shapes
        ckpt.build_network()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

pub fn save_checkpoint(net: &Network<f32>, iteration: u64, path: &Path) -> Result<()> {
    Checkpoint::from_network(net, iteration).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
