use std::fmt::Write as _;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Provenance block written next to every produced artifact. All lines
/// except `timing` are reproducible across identical runs.
pub struct Manifest {
    entries: Vec<(String, String)>,
    started_unix_ms: u128,
    clock: Instant,
}

impl Manifest {
    pub fn new(argv: &[String], config_hash: &str) -> Self {
        let mut m = Manifest {
            entries: Vec::new(),
            started_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            clock: Instant::now(),
        };
        m.add("version", env!("CARGO_PKG_VERSION"));
        m.add("command", argv.join(" "));
        m.add("config_hash", config_hash);
        m
    }

    pub fn add(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn add_path(&mut self, key: &str, path: &Path) {
        self.add(key, path.display());
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# gaintune manifest\n");
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(
            s,
            "timing = started_unix_ms={} wall_ms={}",
            self.started_unix_ms,
            self.clock.elapsed().as_millis()
        );
        s
    }
}
