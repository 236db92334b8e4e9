//! Append-only chain file: `u32 len || record` repeated, where the first
//! record is the genesis encoding and every later one a block encoding.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::block::{decode_block, decode_genesis, Block, Genesis};
use super::LedgerError;

#[derive(Debug)]
pub struct ChainStore {
    path: PathBuf,
    file: File,
}

fn io(e: std::io::Error) -> LedgerError {
    LedgerError::Io(e.to_string())
}

impl ChainStore {
    /// Creates a new file holding only the genesis record.
    pub fn create(path: &Path, genesis: &Genesis) -> Result<Self, LedgerError> {
        let mut file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        write_record(&mut file, &genesis.encode())?;
        Ok(ChainStore {
            path: path.to_owned(),
            file,
        })
    }

    /// Opens an existing file and returns its decoded contents.
    pub fn open(path: &Path) -> Result<(Self, Genesis, Vec<Block>), LedgerError> {
        let mut bytes = Vec::new();
        File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        let mut records = split_records(&bytes)?.into_iter();
        let genesis_bytes = records
            .next()
            .ok_or_else(|| LedgerError::Corrupt("empty chain file".into()))?;
        let genesis = decode_genesis(genesis_bytes).map_err(|e| LedgerError::Corrupt(e.0))?;
        let blocks = records
            .map(|r| decode_block(r).map_err(|e| LedgerError::Corrupt(e.0)))
            .collect::<Result<Vec<_>, _>>()?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok((
            ChainStore {
                path: path.to_owned(),
                file,
            },
            genesis,
            blocks,
        ))
    }

    pub fn append(&mut self, block: &Block) -> Result<(), LedgerError> {
        write_record(&mut self.file, &block.encode())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn write_record(file: &mut File, record: &[u8]) -> Result<(), LedgerError> {
    let mut buf = Vec::with_capacity(4 + record.len());
    buf.extend_from_slice(&(record.len() as u32).to_be_bytes());
    buf.extend_from_slice(record);
    file.write_all(&buf).map_err(io)?;
    file.flush().map_err(io)
}

fn split_records(mut bytes: &[u8]) -> Result<Vec<&[u8]>, LedgerError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return Err(LedgerError::Corrupt("truncated length prefix".into()));
        }
        let n = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() < 4 + n {
            return Err(LedgerError::Corrupt("truncated record".into()));
        }
        out.push(&bytes[4..4 + n]);
        bytes = &bytes[4 + n..];
    }
    Ok(out)
}
