//! Binary model checkpoints: configuration snapshot, vocabulary, and every
//! parameter tensor as little-endian `f64`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::{put_str, put_u32, Reader, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"RGRCKPT\0";
const VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<(Model, Vocabulary)> {
        Ok((Model::with_params(self.config, &self.params)?, self.vocab))
    }
}

pub fn encode_checkpoint(config: &ModelConfig, vocab: &Vocabulary, params: &ParamStore) -> Result<Vec<u8>> {
    let text = toml::to_string(config).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_str(&mut buf, &text);
    put_str(&mut buf, &sha256_hex(text.as_bytes()));
    put_u32(&mut buf, vocab.len() as u32);
    for t in vocab.tokens() {
        put_str(&mut buf, t);
    }
    put_u32(&mut buf, params.len() as u32);
    for (_, name, m) in params.iter() {
        put_str(&mut buf, name);
        put_u32(&mut buf, m.rows() as u32);
        put_u32(&mut buf, m.cols() as u32);
        for &x in m.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let text = r.string()?;
    let hash = r.string()?;
    if hash != sha256_hex(text.as_bytes()) {
        return Err(Error::format("checkpoint", "configuration hash mismatch"));
    }
    let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let n_vocab = r.u32()? as usize;
    let tokens = (0..n_vocab).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f64s(rows * cols)?;
        if params.id(&name).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate tensor {name}")));
        }
        params.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    r.finish()?;
    Ok(Checkpoint {
        config,
        vocab,
        params,
    })
}

pub fn write_checkpoint(path: &Path, model: &Model, vocab: &Vocabulary) -> Result<()> {
    std::fs::write(path, encode_checkpoint(&model.config, vocab, &model.store)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Model, Vocabulary) {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"].map(String::from).to_vec();
        tokens.extend((0..7).map(|i| format!("w{i}")));
        let vocab = Vocabulary::from_tokens(tokens).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.len(),
            ..ModelConfig::micro()
        };
        (Model::new(config).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, vocab) = setup();
        let bytes = encode_checkpoint(&model.config, &vocab, &model.store).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.config, model.config);
        assert_eq!(ck.vocab.tokens(), vocab.tokens());
        assert_eq!(ck.params, model.store);
        let (restored, _) = ck.into_model().unwrap();
        assert_eq!(
            encode_checkpoint(&restored.config, &vocab, &restored.store).unwrap(),
            bytes
        );
    }

    #[test]
    fn corruption_is_detected() {
        let (model, vocab) = setup();
        let bytes = encode_checkpoint(&model.config, &vocab, &model.store).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[20] ^= 1;
        assert!(decode_checkpoint(&bad).is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let (model, _) = setup();
        let other = ModelConfig {
            use_reranker: false,
            ..model.config.clone()
        };
        assert!(Model::with_params(other, &model.store).is_err());
    }
}
