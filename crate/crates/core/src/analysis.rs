//! Tree extraction from trained models and tree-file reading.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::encoders::{AttentionDiag, AttentionMode, Level, Model, Task};
use crate::error::{Error, Result};
use crate::mtt::TreeMarginals;
use crate::trees::{chu_liu_edmonds, DependencyTree};

/// Raw scores and marginals behind a decoded tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalDump {
    pub f: Vec<Vec<f64>>,
    pub f_root: Vec<f64>,
    #[serde(flatten)]
    pub marginals: TreeMarginals,
}

/// One decoded tree.
///
/// `unit` is the sentence index inside a document for sentence-level trees,
/// or 0 (premise) and 1 (hypothesis) for sentence pairs. Document-level
/// records leave it out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub example: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<usize>,
    #[serde(flatten)]
    pub tree: DependencyTree,
    pub root: usize,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub dump: Option<MarginalDump>,
}

fn record(
    example: usize,
    unit: Option<usize>,
    diag: &AttentionDiag,
    with_marginals: bool,
) -> Result<TreeRecord> {
    let tree = chu_liu_edmonds(&diag.scores)?;
    let root = tree
        .root_child()
        .expect("decoded trees have one root child");
    let dump = with_marginals.then(|| {
        let f = diag.scores.f();
        MarginalDump {
            f: (0..f.rows()).map(|r| f.row(r).to_vec()).collect(),
            f_root: diag.scores.f_root().to_vec(),
            marginals: diag.marginals.clone(),
        }
    });
    Ok(TreeRecord {
        example,
        unit,
        tree,
        root,
        dump,
    })
}

/// Decodes the maximum spanning tree of every unit at `level`.
pub fn parse_trees(
    model: &Model,
    examples: &[Example],
    level: Level,
    with_marginals: bool,
) -> Result<Vec<TreeRecord>> {
    let config = model.config();
    if config.level(level).mode != AttentionMode::Structured {
        return Err(Error::ModeMismatch(level.name()));
    }
    if config.task == Task::Nli && level == Level::Document {
        return Err(Error::Config(
            "sentence-pair models have no document level".into(),
        ));
    }

    let mut out = Vec::new();
    for (k, ex) in examples.iter().enumerate() {
        match ex {
            Example::Document(doc) => {
                if config.task != Task::Document {
                    return Err(Error::DimMismatch(format!(
                        "example {k} is a document, model expects pairs"
                    )));
                }
                let diag = model.document_diagnostics(doc)?;
                match level {
                    Level::Document => {
                        let d = diag.document.as_ref().expect("structured document level");
                        out.push(record(k, None, d, with_marginals)?);
                    }
                    Level::Sentence => {
                        for (s, d) in diag.sentences.iter().enumerate() {
                            let d = d.as_ref().expect("structured sentence level");
                            out.push(record(k, Some(s), d, with_marginals)?);
                        }
                    }
                }
            }
            Example::Pair(pair) => {
                if config.task != Task::Nli {
                    return Err(Error::DimMismatch(format!(
                        "example {k} is a sentence pair, model expects documents"
                    )));
                }
                for (side, d) in model.pair_diagnostics(pair)?.iter().enumerate() {
                    let d = d.as_ref().expect("structured sentence level");
                    out.push(record(k, Some(side), d, with_marginals)?);
                }
            }
        }
    }
    Ok(out)
}

pub fn write_records(mut w: impl Write, records: &[TreeRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads trees from JSON Lines. Each line needs a `heads` array (with -1 for
/// the root) and may carry any other fields. Blank lines are ignored.
pub fn parse_tree_lines(reader: impl BufRead) -> Result<Vec<DependencyTree>> {
    let mut trees = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: k + 1,
            message,
        };
        let tree: DependencyTree =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        tree.validate().map_err(|e| parse_err(e.to_string()))?;
        trees.push(tree);
    }
    Ok(trees)
}

pub fn read_trees(path: &Path) -> Result<Vec<DependencyTree>> {
    parse_tree_lines(BufReader::new(std::fs::File::open(path)?))
}
