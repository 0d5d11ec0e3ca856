//! Subprocess evaluators speaking JSON over stdin/stdout.
//!
//! The child receives `{"content": "..."}` on stdin and must print
//! `{"reward": r, "valid": b, "feedback": "..."}` as its last stdout line.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;
use wait_timeout::ChildExt;

use super::{EvalResult, TaskError};

#[derive(Debug, Deserialize)]
struct Reply {
    reward: f64,
    valid: bool,
    #[serde(default)]
    feedback: String,
}

fn drain<R: Read + Send + 'static>(source: Option<R>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut s) = source {
            let _ = s.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

pub fn external_evaluate(argv: &[String], content: &str, time_limit: Duration) -> Result<EvalResult, TaskError> {
    let (program, args) = argv.split_first().ok_or_else(|| TaskError::Misconfigured("empty evaluator command".into()))?;
    let start = Instant::now();
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| TaskError::SpawnFailure(format!("{program}: {e}")))?;

    let payload = json!({ "content": content }).to_string();
    let stdin = child.stdin.take();
    let writer = thread::spawn(move || {
        if let Some(mut s) = stdin {
            // A child that never reads stdin is not an error.
            let _ = s.write_all(payload.as_bytes());
            let _ = s.write_all(b"\n");
        }
    });
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());

    let status = child.wait_timeout(time_limit).map_err(|e| TaskError::SpawnFailure(e.to_string()))?;
    let status = match status {
        Some(s) => s,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            let _ = writer.join();
            return Ok(EvalResult::invalid("timeout".into(), start.elapsed()));
        }
    };
    let _ = writer.join();
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    let elapsed = start.elapsed();

    if !status.success() {
        let code = status.code().map_or("signal".to_string(), |c| c.to_string());
        return Ok(EvalResult::invalid(format!("evaluator exited with {code}: {}", stderr.trim()), elapsed));
    }
    let last = stdout.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    match serde_json::from_str::<Reply>(last) {
        Ok(r) if r.valid && r.reward.is_finite() => Ok(EvalResult::scored(r.reward, r.feedback, elapsed)),
        Ok(r) => Ok(EvalResult::invalid(r.feedback, elapsed)),
        Err(e) => Ok(EvalResult::invalid(format!("unreadable evaluator reply ({e}): {}", last.trim()), elapsed)),
    }
}
