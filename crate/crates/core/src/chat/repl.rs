use std::io::{BufRead, Write};

use super::{respond, ChatSession, LoadedModel};
use crate::error::{Error, Result};

/// Reads one utterance per line and writes one reply per line until end of
/// input or `/quit`. Input and persona errors are reported inline.
pub fn run_repl<R: BufRead, W: Write>(
    model: &LoadedModel,
    session: &mut ChatSession,
    input: R,
    mut output: W,
    prompt: bool,
) -> Result<()> {
    let mut lines = input.lines();
    loop {
        if prompt {
            write!(output, "> ")?;
            output.flush()?;
        }
        let Some(line) = lines.next().transpose()? else {
            break;
        };
        let line = line.trim();
        if line == "/quit" {
            break;
        }
        match respond(model, session, line) {
            Ok(r) => writeln!(output, "{}", r.reply)?,
            Err(e @ (Error::Input(_) | Error::Persona(_))) => writeln!(output, "[{e}]")?,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
