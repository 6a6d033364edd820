//! Output directory bookkeeping: every artifact goes through one writer so a
//! failed run can remove what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pat_lab::io::{sidecar_path, write_field_csv, write_pgm, write_trace_csv};
use pat_lab::{BoundaryTrace, ScalarField};
use serde::Serialize;

pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
    gnuplot: bool,
}

impl OutputDir {
    pub fn create(root: &Path, gnuplot: bool) -> Result<Self> {
        let mut created_dirs = Vec::new();
        if !root.exists() {
            fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
            created_dirs.push(root.to_path_buf());
        }
        Ok(Self { root: root.to_path_buf(), written: Vec::new(), created_dirs, gnuplot })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn written(&self) -> Vec<String> {
        self.written
            .iter()
            .map(|p| p.strip_prefix(&self.root).unwrap_or(p).display().to_string())
            .collect()
    }

    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        if let Some(parent) = p.parent() {
            if !parent.exists() {
                fs::create_dir_all(parent)?;
                self.created_dirs.push(parent.to_path_buf());
            }
        }
        self.written.push(p.clone());
        Ok(p)
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    pub fn table<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let p = self.path(name)?;
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn field(&mut self, stem: &str, f: &ScalarField) -> Result<()> {
        let pgm = self.path(&format!("{stem}.pgm"))?;
        write_pgm(&pgm, f)?;
        self.written.push(sidecar_path(&pgm));
        let csv = self.path(&format!("{stem}.csv"))?;
        write_field_csv(fs::File::create(&csv)?, f)?;
        Ok(())
    }

    pub fn image(&mut self, name: &str, f: &ScalarField) -> Result<()> {
        let pgm = self.path(name)?;
        write_pgm(&pgm, f)?;
        self.written.push(sidecar_path(&pgm));
        Ok(())
    }

    pub fn trace(&mut self, name: &str, t: &BoundaryTrace) -> Result<()> {
        let p = self.path(name)?;
        write_trace_csv(fs::File::create(&p)?, t)?;
        Ok(())
    }

    /// Companion plot script, only with `--emit-gnuplot`.
    pub fn gnuplot(&mut self, name: &str, script: &str) -> Result<()> {
        if !self.gnuplot {
            return Ok(());
        }
        let p = self.path(name)?;
        fs::write(p, script)?;
        Ok(())
    }

    /// Removes everything this run wrote, newest first.
    pub fn discard(&mut self) {
        for p in self.written.drain(..).rev() {
            let _ = fs::remove_file(p);
        }
        for d in self.created_dirs.drain(..).rev() {
            if d != self.root {
                let _ = fs::remove_dir(d);
            }
        }
    }
}
