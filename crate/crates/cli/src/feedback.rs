//! Operator feedback typed at the terminal.
//!
//! One line per review:
//!
//! ```text
//! approve [notes...]
//! reject [notes...]
//! adjust <category>[,<category>...] [notes...]
//! ```
//!
//! Categories are `too_close`, `too_far`, `hit_obstacle`, `too_slow` and
//! `too_jerky` (case and separators are ignored).

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};

use crewforge::orchestrator::{FeedbackSource, SessionState};
use crewforge::tester::{FeedbackCategory, UserFeedback, Verdict};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackLineError(pub String);

impl fmt::Display for FeedbackLineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for FeedbackLineError {}

pub const FEEDBACK_HELP: &str =
    "enter: approve [notes] | reject [notes] | adjust too_close,too_far,hit_obstacle,too_slow,too_jerky [notes]";

pub fn parse_feedback_line(line: &str) -> Result<UserFeedback, FeedbackLineError> {
    let line = line.trim();
    let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
    let rest = rest.trim();
    let fb = |verdict, categories, notes: &str| UserFeedback { verdict, categories, notes: notes.to_string() };
    match word.to_ascii_lowercase().as_str() {
        "approve" => Ok(fb(Verdict::Approve, vec![], rest)),
        "reject" => Ok(fb(Verdict::Reject, vec![], rest)),
        "adjust" => {
            let (list, notes) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
            if list.is_empty() {
                return Err(FeedbackLineError("adjust needs at least one category".into()));
            }
            let categories = list
                .split(',')
                .filter(|c| !c.is_empty())
                .map(|c| FeedbackCategory::parse(c).ok_or_else(|| FeedbackLineError(format!("unknown category {c:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(fb(Verdict::Adjust, categories, notes.trim()))
        }
        "" => Err(FeedbackLineError("empty feedback".into())),
        other => Err(FeedbackLineError(format!("unknown verdict {other:?}"))),
    }
}

/// Reads one line into the buffer, returning the byte count (0 at end of input).
pub type LineReader = Box<dyn FnMut(&mut String) -> std::io::Result<usize> + Send>;

/// Lines from standard input.
pub fn stdin_lines() -> LineReader {
    Box::new(|buf| std::io::stdin().read_line(buf))
}

/// Lines from any buffered reader.
pub fn reader_lines(mut r: impl BufRead + Send + 'static) -> LineReader {
    Box::new(move |buf| r.read_line(buf))
}

/// Replays scripted feedback first, then prompts for typed lines.
pub struct TerminalFeedback<W> {
    scripted: VecDeque<UserFeedback>,
    input: LineReader,
    prompt: W,
}

impl<W: Write + Send> TerminalFeedback<W> {
    pub fn new(scripted: impl IntoIterator<Item = UserFeedback>, input: LineReader, prompt: W) -> Self {
        TerminalFeedback { scripted: scripted.into_iter().collect(), input, prompt }
    }

    fn ask(&mut self, state: &SessionState) -> Option<UserFeedback> {
        if let Some(r) = state.last_test_report() {
            let _ = writeln!(self.prompt, "review: objective {:.4}", r.objective);
            for s in &r.scenarios {
                let m = &s.metrics;
                let _ = writeln!(
                    self.prompt,
                    "  {:<14} band {:.3}  rms {:.3}  collisions {}  lost {}",
                    s.name, m.band_fraction, m.rms_dist_error, m.collisions, m.target_lost
                );
            }
        }
        loop {
            let _ = write!(self.prompt, "feedback> ");
            let _ = self.prompt.flush();
            let mut line = String::new();
            match (self.input)(&mut line) {
                Ok(0) | Err(_) => return None,
                Ok(_) => {}
            }
            match parse_feedback_line(&line) {
                Ok(fb) => return Some(fb),
                Err(e) => {
                    let _ = writeln!(self.prompt, "{e}\n{FEEDBACK_HELP}");
                }
            }
        }
    }
}

impl<W: Write + Send> FeedbackSource for TerminalFeedback<W> {
    fn next_feedback(&mut self, state: &SessionState) -> Option<UserFeedback> {
        match self.scripted.pop_front() {
            Some(fb) => Some(fb),
            None => self.ask(state),
        }
    }
}
