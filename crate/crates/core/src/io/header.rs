use std::io::BufRead;

use crate::{Error, Result};

/// Byte-wise reader for whitespace-separated ASCII headers.
pub(crate) struct HeaderReader<R> {
    inner: R,
}

impl<R: BufRead> HeaderReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        HeaderReader { inner }
    }

    fn byte(&mut self) -> Result<Option<u8>> {
        let buf = self.inner.fill_buf()?;
        let Some(&b) = buf.first() else { return Ok(None) };
        self.inner.consume(1);
        Ok(Some(b))
    }

    pub(crate) fn into_inner(self) -> R {
        self.inner
    }
}

/// Next token, skipping leading whitespace and `#` comments. Exactly one
/// terminating whitespace byte is consumed.
pub(crate) fn read_token<R: BufRead>(r: &mut HeaderReader<R>, kind: &'static str) -> Result<String> {
    let eof = || Error::Format {
        kind,
        msg: "truncated header".into(),
    };
    let mut b = r.byte()?.ok_or_else(eof)?;
    loop {
        if b == b'#' {
            while b != b'\n' {
                b = r.byte()?.ok_or_else(eof)?;
            }
        }
        if !b.is_ascii_whitespace() {
            break;
        }
        b = r.byte()?.ok_or_else(eof)?;
    }
    let mut tok = vec![b];
    loop {
        match r.byte()? {
            Some(c) if c.is_ascii_whitespace() => break,
            Some(c) => tok.push(c),
            None => return Err(eof()),
        }
        if tok.len() > 64 {
            return Err(Error::Format {
                kind,
                msg: "header token too long".into(),
            });
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format {
        kind,
        msg: "non-ASCII header".into(),
    })
}
