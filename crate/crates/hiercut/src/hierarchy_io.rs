//! Hierarchy files: one JSON object per node with `name` and optional
//! `children`; the top-level object is the root.

use std::path::Path;

use hiercut_core::{ClassTree, HierarchyError, NodeSpec};

use crate::error::{read_text, Error, Result};

/// The four-branch, eleven-leaf nucleus tree shipped with the crate.
pub const BUNDLED_TREE: &str = include_str!("../data/nucleus_tree.json");

pub fn bundled_tree() -> ClassTree {
    parse_hierarchy(BUNDLED_TREE).expect("bundled tree is valid")
}

pub fn parse_hierarchy(text: &str) -> Result<ClassTree> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::data(format!("malformed hierarchy at line {}: {e}", e.line())))?;
    if let serde_json::Value::Array(items) = &value {
        let names: Vec<String> = items.iter().map(|v| v.get("name").map_or("?".into(), |n| n.to_string())).collect();
        return Err(Error::data(format!("hierarchy has multiple roots ({}); wrap them in one root node", names.join(", "))));
    }
    // Reparse from text so node errors carry a line number.
    let spec: NodeSpec =
        serde_json::from_str(text).map_err(|e| Error::data(format!("malformed hierarchy at line {}: {e}", e.line())))?;
    ClassTree::from_spec(&spec).map_err(|e| match &e {
        HierarchyError::DuplicateName(name) => match name_line(text, name, 2) {
            Some(line) => Error::data(format!("duplicate node name {name:?} at line {line}")),
            None => Error::data(e.to_string()),
        },
        _ => Error::data(e.to_string()),
    })
}

pub fn load_hierarchy(path: &Path) -> Result<ClassTree> {
    parse_hierarchy(&read_text(path)?).map_err(|e| e.context(path.display()))
}

/// Pretty JSON for `tree`; parsing it back gives the same fingerprint.
pub fn serialize_hierarchy(tree: &ClassTree) -> String {
    serde_json::to_string_pretty(&tree.to_spec()).expect("node specs serialize")
}

/// 1-based line of the `nth` `"name": "<name>"` pair in `text`.
fn name_line(text: &str, name: &str, nth: usize) -> Option<usize> {
    let quoted = serde_json::to_string(name).ok()?;
    let mut seen = 0;
    for (offset, _) in text.match_indices("\"name\"") {
        let rest = text[offset + 6..].trim_start();
        let Some(rest) = rest.strip_prefix(':') else { continue };
        if rest.trim_start().starts_with(&quoted) {
            seen += 1;
            if seen == nth {
                return Some(text[..offset].matches('\n').count() + 1);
            }
        }
    }
    None
}
