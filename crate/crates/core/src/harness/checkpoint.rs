//! Plain-text checkpoints.
//!
//! ```text
//! ego-anticipation checkpoint 1
//! epoch = 7
//! val_top5_1s = 0.41
//! config_hash = <sha256 hex>
//! d_feat = 32
//! num_actions = 12
//! [config]
//! <RunConfig key = value lines>
//! [params]
//! <name> <dim>x<dim>... <value> <value> ...
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so reloading gives
//! bit-identical parameters.

use std::fmt::Write as _;
use std::path::Path;

use super::RunConfig;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::pipeline::ModelParams;

const MAGIC: &str = "ego-anticipation checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub epoch: usize,
    pub val_top5_1s: f64,
    pub config: RunConfig,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC}\n");
        writeln!(out, "epoch = {}", self.epoch).expect("string write");
        writeln!(out, "val_top5_1s = {}", self.val_top5_1s).expect("string write");
        writeln!(out, "config_hash = {}", self.config_hash).expect("string write");
        writeln!(out, "d_feat = {}", self.model.config.d_feat).expect("string write");
        writeln!(out, "num_actions = {}", self.model.config.num_actions).expect("string write");
        out.push_str("[config]\n");
        out.push_str(&self.config.to_kv_string());
        out.push_str("[params]\n");
        for p in self.model.store.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            write!(out, "{} {}", p.name, dims.join("x")).expect("string write");
            for v in p.value.data() {
                write!(out, " {v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&MAGIC) {
            return Err(Error::load(path, 1, format!("expected `{MAGIC}`")));
        }
        let find = |marker: &str| {
            lines.iter().position(|l| *l == marker).ok_or_else(|| {
                Error::load(path, lines.len(), format!("missing `{marker}` section"))
            })
        };
        let (config_at, params_at) = (find("[config]")?, find("[params]")?);
        if params_at < config_at {
            return Err(Error::load(
                path,
                params_at + 1,
                "[params] must follow [config]",
            ));
        }

        let header = KvFile::parse(&lines[1..config_at].join("\n"), Some(path))?;
        let field = |key: &str| -> Result<&crate::kv::KvEntry> {
            header.get(key).ok_or_else(|| {
                Error::load(path, config_at + 1, format!("missing header field `{key}`"))
            })
        };
        let epoch: usize = header.value(field("epoch")?)?;
        let val_top5_1s: f64 = header.value(field("val_top5_1s")?)?;
        let config_hash = field("config_hash")?.value.clone();
        let d_feat: usize = header.value(field("d_feat")?)?;
        let num_actions: usize = header.value(field("num_actions")?)?;

        let config_text = lines[config_at + 1..params_at].join("\n");
        let config = RunConfig::from_kv(&KvFile::parse(&config_text, Some(path))?)?;
        if config.hash() != config_hash {
            return Err(Error::load(
                path,
                0,
                "config hash does not match the embedded configuration",
            ));
        }

        let mut store = ParamStore::new();
        for (offset, line) in lines[params_at + 1..].iter().enumerate() {
            let line_no = params_at + 2 + offset;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().expect("non-empty line");
            let dims = parts
                .next()
                .ok_or_else(|| Error::load(path, line_no, "missing shape"))?
                .split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| Error::load(path, line_no, format!("bad shape `{d}`")))
                })
                .collect::<Result<Vec<usize>>>()?;
            let data = parts
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::load(path, line_no, format!("bad value `{v}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let tensor =
                Tensor::new(dims, data).map_err(|e| Error::load(path, line_no, e.to_string()))?;
            if store.find(name).is_some() {
                return Err(Error::load(
                    path,
                    line_no,
                    format!("duplicate parameter `{name}`"),
                ));
            }
            store.add(name, tensor);
        }
        let model = ModelParams::from_store(config.model_config(d_feat, num_actions), store)
            .map_err(|e| Error::load(path, 0, e.to_string()))?;
        Ok(Self {
            model,
            epoch,
            val_top5_1s,
            config,
            config_hash,
        })
    }
}
