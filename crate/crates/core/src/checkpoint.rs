//! Model checkpoints with an optional forecaster block appended.
//!
//! The file is a `PSAM` model record, optionally followed by one `PSFC`
//! forecaster record whose shape is taken from the model header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::arm::{Arm, ArmModel};
use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::forecast::Forecaster;

pub fn write_checkpoint(w: &mut impl Write, model: &ArmModel, forecaster: Option<&Forecaster>) -> Result<()> {
    model.write_to(w)?;
    if let Some(f) = forecaster {
        f.check_compatible(model)?;
        f.write_to(w)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<(ArmModel, Option<Forecaster>)> {
    let mut reader = Reader::new(r);
    let model = ArmModel::read_with(&mut reader)?;
    let forecaster = match reader.optional_tag()? {
        None => None,
        Some(tag) if &tag == Forecaster::MAGIC => Some(Forecaster::read_body(
            &mut reader,
            model.seq_len(),
            model.categories(),
            model.hidden_width(),
        )?),
        Some(tag) => {
            return Err(Error::BadHeader {
                kind: "forecaster checkpoint",
                reason: format!("magic {:?}", String::from_utf8_lossy(&tag)),
            })
        }
    };
    if reader.optional_tag()?.is_some() {
        return Err(Error::BadHeader {
            kind: "checkpoint",
            reason: "trailing data".into(),
        });
    }
    Ok((model, forecaster))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ArmModel, forecaster: Option<&Forecaster>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, forecaster)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ArmModel, Option<Forecaster>)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::ArmConfig;
    use crate::forecast::ForecasterConfig;
    use crate::numeric::Rng;

    fn model() -> ArmModel {
        let cfg = ArmConfig {
            embed: 3,
            hidden: 5,
            layers: 2,
            output_init_scale: 1.0,
            ..ArmConfig::new(6, 4)
        };
        ArmModel::new(cfg, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn roundtrip_with_and_without_forecaster() {
        let m = model();
        let f = Forecaster::for_model(ForecasterConfig::new(2), &m)
            .unwrap()
            .randomized(0.5, &mut Rng::new(1));
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m, Some(&f)).unwrap();
        let (m2, f2) = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(m2.params().flatten(), m.params().flatten());
        assert_eq!(f2.unwrap().flatten(), f.flatten());

        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m, None).unwrap();
        let (_, none) = read_checkpoint(bytes.as_slice()).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn rejects_garbage_tail() {
        let m = model();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m, None).unwrap();
        bytes.extend_from_slice(b"XXXX");
        assert!(read_checkpoint(bytes.as_slice()).is_err());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m, None).unwrap();
        bytes.extend_from_slice(b"PS");
        assert!(read_checkpoint(bytes.as_slice()).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.psam");
        let m = model();
        save_checkpoint(&path, &m, None).unwrap();
        let (m2, _) = load_checkpoint(&path).unwrap();
        assert_eq!(m2.params().flatten(), m.params().flatten());
    }
}
