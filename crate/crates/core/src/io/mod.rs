//! On-disk formats: annotations (JSON text), frame feature maps and model
//! checkpoints (little-endian binary).

pub mod annotations;
pub mod checkpoint;
pub mod feature_file;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn error(&self, field: &str, message: impl std::fmt::Display) -> crate::Error {
        crate::Error::Parse {
            location: format!("{} byte offset {}", self.what, self.pos),
            message: format!("{field}: {message}"),
        }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> crate::Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(field, format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, field: &str) -> crate::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self, field: &str) -> crate::Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub(crate) fn f32(&mut self, field: &str) -> crate::Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, field: &str) -> crate::Result<String> {
        let n = self.u32(field)? as usize;
        let b = self.take(n, field)?;
        String::from_utf8(b.to_vec()).map_err(|e| self.error(field, e))
    }

    pub(crate) fn finish(&self) -> crate::Result<()> {
        if self.remaining() != 0 {
            return Err(self.error("trailer", format!("{} unexpected trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}
