//! Hierarchical tic-toc profiler with per-worker timer trees and XML output.

use crate::memtrack;
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfilerError {
    #[error("toc(\"{got}\") does not match the open timer \"{expected}\"")]
    Mismatched { got: String, expected: String },
    #[error("toc(\"{0}\") with no open timer")]
    NoOpenTimer(String),
    #[error("profiler finished with timers still open: {0:?}")]
    StillOpen(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct ProfileNode {
    pub name: String,
    pub wall_seconds: f64,
    pub peak_memory_bytes: usize,
    pub children: Vec<ProfileNode>,
}

struct OpenTimer {
    name: String,
    start: Instant,
    children: Vec<ProfileNode>,
}

/// Per-worker profiler; tic/toc must nest strictly.
pub struct Profiler {
    pub worker_id: usize,
    stack: Vec<OpenTimer>,
    roots: Vec<ProfileNode>,
}

impl Profiler {
    pub fn new(worker_id: usize) -> Self {
        Profiler {
            worker_id,
            stack: Vec::new(),
            roots: Vec::new(),
        }
    }

    pub fn tic(&mut self, name: &str) {
        self.stack.push(OpenTimer {
            name: name.to_string(),
            start: Instant::now(),
            children: Vec::new(),
        });
    }

    pub fn toc(&mut self, name: &str) -> Result<(), ProfilerError> {
        let top = self
            .stack
            .pop()
            .ok_or_else(|| ProfilerError::NoOpenTimer(name.to_string()))?;
        if top.name != name {
            let expected = top.name.clone();
            self.stack.push(top);
            return Err(ProfilerError::Mismatched {
                got: name.to_string(),
                expected,
            });
        }
        let node = ProfileNode {
            name: top.name,
            wall_seconds: top.start.elapsed().as_secs_f64(),
            peak_memory_bytes: memtrack::peak_bytes(),
            children: top.children,
        };
        match self.stack.last_mut() {
            Some(parent) => parent.children.push(node),
            None => self.roots.push(node),
        }
        Ok(())
    }

    /// Run a closure under a named timer.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        self.tic(name);
        let out = f();
        self.toc(name).expect("scoped timer is balanced");
        out
    }

    pub fn finish(self) -> Result<(usize, Vec<ProfileNode>), ProfilerError> {
        if !self.stack.is_empty() {
            return Err(ProfilerError::StillOpen(
                self.stack.iter().map(|t| t.name.clone()).collect(),
            ));
        }
        Ok((self.worker_id, self.roots))
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn emit_node(out: &mut String, node: &ProfileNode, indent: usize) {
    let pad = "  ".repeat(indent);
    let _ = write!(
        out,
        "{pad}<timer name=\"{}\" wall_s=\"{:.9}\" mem_peak_b=\"{}\"",
        xml_escape(&node.name),
        node.wall_seconds,
        node.peak_memory_bytes
    );
    if node.children.is_empty() {
        out.push_str("/>\n");
    } else {
        out.push_str(">\n");
        for c in &node.children {
            emit_node(out, c, indent + 1);
        }
        let _ = writeln!(out, "{pad}</timer>");
    }
}

/// One `<worker rank=..>` tree per worker, wrapped in a single `<profile>`
/// document.
pub fn emit_profile(trees: &[(usize, Vec<ProfileNode>)]) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<profile>\n");
    for (rank, roots) in trees {
        let _ = writeln!(out, "  <worker rank=\"{rank}\">");
        for r in roots {
            emit_node(&mut out, r, 2);
        }
        out.push_str("  </worker>\n");
    }
    out.push_str("</profile>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nesting_recorded() {
        let mut p = Profiler::new(0);
        p.tic("a");
        p.tic("b");
        p.toc("b").unwrap();
        p.toc("a").unwrap();
        let (_, roots) = p.finish().unwrap();
        assert_eq!(roots.len(), 1);
        assert_eq!(roots[0].name, "a");
        assert_eq!(roots[0].children.len(), 1);
        assert_eq!(roots[0].children[0].name, "b");
        assert!(roots[0].wall_seconds >= roots[0].children[0].wall_seconds);
    }

    #[test]
    fn mismatched_toc_names_expected_timer() {
        let mut p = Profiler::new(0);
        p.tic("outer");
        match p.toc("inner") {
            Err(ProfilerError::Mismatched { got, expected }) => {
                assert_eq!(got, "inner");
                assert_eq!(expected, "outer");
            }
            other => panic!("{other:?}"),
        }
        // the open timer is preserved and can still be closed properly
        p.toc("outer").unwrap();
    }

    #[test]
    fn toc_without_tic_is_an_error() {
        let mut p = Profiler::new(0);
        assert!(matches!(p.toc("x"), Err(ProfilerError::NoOpenTimer(_))));
    }

    #[test]
    fn finish_rejects_open_timers() {
        let mut p = Profiler::new(1);
        p.tic("left-open");
        assert!(matches!(p.finish(), Err(ProfilerError::StillOpen(_))));
    }

    #[test]
    fn xml_structure_per_worker() {
        let mut trees = Vec::new();
        for rank in 0..4 {
            let mut p = Profiler::new(rank);
            p.tic("root");
            p.tic("child");
            p.toc("child").unwrap();
            p.toc("root").unwrap();
            trees.push(p.finish().unwrap());
        }
        let xml = emit_profile(&trees);
        for rank in 0..4 {
            assert!(xml.contains(&format!("<worker rank=\"{rank}\">")));
        }
        // well-formedness: every opening tag closed, counted structurally
        assert_eq!(xml.matches("<worker").count(), xml.matches("</worker>").count());
        let opens = xml.matches("<timer").count();
        let selfclosed = xml.matches("/>").count();
        let closed = xml.matches("</timer>").count();
        assert_eq!(opens, selfclosed + closed);
        assert!(xml.contains("name=\"child\""));
    }
}
