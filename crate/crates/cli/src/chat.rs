//! Terminal play: the person at the keyboard is the user.

use std::io::{BufRead, Write};

use anyhow::{anyhow, bail};
use serde_json::{json, Value};

use crate::api::Service;

fn read_line(input: &mut impl BufRead) -> anyhow::Result<String> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        bail!("input closed");
    }
    Ok(line.trim().to_owned())
}

/// `y`/`n` (or `1`/`0`) per choice, separated by spaces or commas.
pub fn parse_answers(line: &str) -> Option<Vec<bool>> {
    line.split(|ch: char| ch.is_whitespace() || ch == ',')
        .filter(|t| !t.is_empty())
        .map(|t| match t.to_ascii_lowercase().as_str() {
            "y" | "yes" | "1" => Some(true),
            "n" | "no" | "0" => Some(false),
            _ => None,
        })
        .collect()
}

fn expect_ok((status, body): (u16, Value)) -> anyhow::Result<Value> {
    if (200..300).contains(&status) {
        Ok(body)
    } else {
        Err(anyhow!("{status}: {}", body["error"].as_str().unwrap_or("request failed")))
    }
}

/// Runs one conversation and returns the final reply.
pub fn run_chat(
    service: &Service,
    attribute: Option<usize>,
    input: &mut impl BufRead,
    out: &mut impl Write,
) -> anyhow::Result<Value> {
    let attribute = match attribute {
        Some(a) => a,
        None => loop {
            write!(out, "opening attribute id: ")?;
            out.flush()?;
            match read_line(input)?.parse() {
                Ok(a) => break a,
                Err(_) => writeln!(out, "please enter a number")?,
            }
        },
    };
    let body = json!({ "initial_attribute_id": attribute }).to_string();
    let mut reply = expect_ok(service.handle_request("POST", "/api/sessions", body.as_bytes()))?;
    let id = reply["session_id"].as_str().ok_or_else(|| anyhow!("no session id"))?.to_owned();
    let path = format!("/api/sessions/{id}/responses");
    while let Some(q) = reply.get("question").filter(|q| !q.is_null()).cloned() {
        let choices = q["choices"].as_array().cloned().unwrap_or_default();
        let verb = if q["option"] == "ask" { "Do you want" } else { "Would you take" };
        writeln!(out, "turn {}: {verb}", reply["turn"].as_u64().unwrap_or(0) + 1)?;
        for (i, ch) in choices.iter().enumerate() {
            writeln!(out, "  {}. {}", i + 1, ch["label"].as_str().unwrap_or("?"))?;
        }
        let answers = loop {
            write!(out, "answer y/n for each of the {}: ", choices.len())?;
            out.flush()?;
            match parse_answers(&read_line(input)?) {
                Some(a) if a.len() == choices.len() => break a,
                _ => writeln!(out, "expected {} answers", choices.len())?,
            }
        };
        let body = json!({ "accepted": answers }).to_string();
        reply = expect_ok(service.handle_request("POST", &path, body.as_bytes()))?;
    }
    match reply["status"].as_str() {
        Some("success") => writeln!(out, "found it at turn {} (rank {})", reply["turn"], reply["rank"])?,
        _ => writeln!(out, "no match after {} turns", reply["turn"])?,
    }
    service.handle_request("DELETE", &format!("/api/sessions/{id}"), b"");
    Ok(reply)
}
