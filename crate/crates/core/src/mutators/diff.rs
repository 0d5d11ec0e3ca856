//! SEARCH/REPLACE diff blocks and fenced full answers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEARCH_MARKER: &str = "<<<<<<< SEARCH";
pub const DIVIDER_MARKER: &str = "=======";
pub const REPLACE_MARKER: &str = ">>>>>>> REPLACE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffBlock {
    pub search: String,
    pub replace: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("MalformedDiff: {0}")]
    MalformedDiff(String),
    #[error("SearchNotFound(block {0})")]
    SearchNotFound(usize),
}

/// Removes `<think>...</think>` spans. An unclosed tag drops the rest.
pub fn strip_think(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("<think>") {
        out.push_str(&rest[..start]);
        match rest[start..].find("</think>") {
            Some(end) => rest = &rest[start + end + "</think>".len()..],
            None => return out,
        }
    }
    out.push_str(rest);
    out
}

/// Extracts every SEARCH/REPLACE block in order, ignoring surrounding prose.
pub fn parse_diff(response: &str) -> Result<Vec<DiffBlock>, DiffError> {
    let text = strip_think(response);
    let mut blocks = Vec::new();
    let mut lines = text.lines().enumerate();
    while let Some((line_no, line)) = lines.next() {
        if line.trim_end() != SEARCH_MARKER {
            continue;
        }
        let mut search = Vec::new();
        let mut replace = Vec::new();
        let mut in_replace = false;
        let mut closed = false;
        for (_, inner) in lines.by_ref() {
            let marker = inner.trim_end();
            if !in_replace && marker == DIVIDER_MARKER {
                in_replace = true;
            } else if marker == REPLACE_MARKER {
                if !in_replace {
                    return Err(DiffError::MalformedDiff(format!(
                        "block opened on line {} has no divider",
                        line_no + 1
                    )));
                }
                closed = true;
                break;
            } else if marker == SEARCH_MARKER {
                return Err(DiffError::MalformedDiff(format!(
                    "block opened on line {} is not terminated before the next block",
                    line_no + 1
                )));
            } else if in_replace {
                replace.push(inner);
            } else {
                search.push(inner);
            }
        }
        if !closed {
            return Err(DiffError::MalformedDiff(format!(
                "block opened on line {} has no {REPLACE_MARKER:?} terminator",
                line_no + 1
            )));
        }
        let search = search.join("\n");
        if search.is_empty() {
            return Err(DiffError::MalformedDiff(format!("block opened on line {} has an empty search", line_no + 1)));
        }
        blocks.push(DiffBlock { search, replace: replace.join("\n") });
    }
    Ok(blocks)
}

/// Applies blocks in sequence, each at the first exact occurrence in the
/// working text.
pub fn apply_diff(content: &str, blocks: &[DiffBlock]) -> Result<String, DiffError> {
    let mut text = content.to_string();
    for (i, block) in blocks.iter().enumerate() {
        let pos = text.find(&block.search).ok_or(DiffError::SearchNotFound(i))?;
        text.replace_range(pos..pos + block.search.len(), &block.replace);
    }
    Ok(text)
}

/// Body of the last ```` ```<lang> ```` fenced block, if any.
pub fn parse_full_answer(response: &str, fence_language: &str) -> Option<String> {
    let text = strip_think(response);
    let opener = format!("```{fence_language}");
    let mut last = None;
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        if line.trim() != opener {
            continue;
        }
        let mut body = Vec::new();
        let mut closed = false;
        for inner in lines.by_ref() {
            if inner.trim() == "```" {
                closed = true;
                break;
            }
            body.push(inner);
        }
        if closed {
            last = Some(body.join("\n"));
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(search: &str, replace: &str) -> DiffBlock {
        DiffBlock { search: search.into(), replace: replace.into() }
    }

    #[test]
    fn parses_single_block_with_prose() {
        let resp = "<think>\n<<<<<<< SEARCH\nignored\n</think>Here is my change:\n<<<<<<< SEARCH\nx = 1\ny = 2\n=======\nx = 3\n>>>>>>> REPLACE\nDone.";
        assert_eq!(parse_diff(resp).unwrap(), vec![block("x = 1\ny = 2", "x = 3")]);
    }

    #[test]
    fn zero_blocks_and_malformed() {
        assert!(parse_diff("just prose").unwrap().is_empty());
        assert!(matches!(parse_diff("<<<<<<< SEARCH\na\n=======\nb\n"), Err(DiffError::MalformedDiff(_))));
        assert!(matches!(parse_diff("<<<<<<< SEARCH\na\n>>>>>>> REPLACE"), Err(DiffError::MalformedDiff(_))));
    }

    #[test]
    fn multiple_blocks_in_order() {
        let resp = "<<<<<<< SEARCH\na\n=======\nb\n>>>>>>> REPLACE\ntext\n<<<<<<< SEARCH\nc\n=======\n\n>>>>>>> REPLACE";
        assert_eq!(parse_diff(resp).unwrap(), vec![block("a", "b"), block("c", "")]);
    }

    #[test]
    fn apply_examples() {
        assert_eq!(apply_diff("a\nb\nc", &[block("b", "B")]).unwrap(), "a\nB\nc");
        assert_eq!(apply_diff("abc", &[block("z", "y")]).unwrap_err(), DiffError::SearchNotFound(0));
        // The second block matches text produced by the first.
        let chained = apply_diff("one two", &[block("one", "three"), block("three two", "done")]).unwrap();
        assert_eq!(chained, "done");
        assert_eq!(apply_diff("x x x", &[block("x", "y")]).unwrap(), "y x x");
        assert_eq!(apply_diff("keep", &[]).unwrap(), "keep");
    }

    #[test]
    fn full_answer_fences() {
        assert_eq!(parse_full_answer("```python\nprint(1)\n```", "python").unwrap(), "print(1)");
        let two = "```python\nfirst\n```\ntext\n```python\nsecond\nline\n```";
        assert_eq!(parse_full_answer(two, "python").unwrap(), "second\nline");
        assert_eq!(parse_full_answer("no fences", "python"), None);
        assert_eq!(parse_full_answer("```yaml\na: 1\n```", "python"), None);
        assert_eq!(parse_full_answer("<think>```json\n[1]\n```</think>", "json"), None);
    }

    proptest! {
        #[test]
        fn swap_round_trip(prefix in "[a-m]{0,10}", x in "[n-s]{1,5}", suffix in "[a-m]{0,10}", y in "[t-z]{1,5}") {
            let content = format!("{prefix}{x}{suffix}");
            let there = apply_diff(&content, &[block(&x, &y)]).unwrap();
            let back = apply_diff(&there, &[block(&y, &x)]).unwrap();
            prop_assert_eq!(back, content);
        }

        #[test]
        fn empty_diff_is_identity(content in ".{0,50}") {
            prop_assert_eq!(apply_diff(&content, &[]).unwrap(), content);
        }
    }
}
