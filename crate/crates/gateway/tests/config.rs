use std::path::PathBuf;

use covcert_gateway::config::{Config, ConfigError, CONFIG_ENV};

#[test]
fn env_var_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("covcert.conf");
    std::fs::write(&path, "port = 9123\nauthorities = 7\nstate_dir = /srv/covcert\n").unwrap();
    let other = dir.path().join("other.conf");
    std::fs::write(&other, "port = 9999\n").unwrap();

    std::env::set_var(CONFIG_ENV, &path);
    let cfg = Config::resolve(None).unwrap();
    assert_eq!((cfg.port, cfg.authorities), (9123, 7));
    assert_eq!(cfg.state_dir, Some(PathBuf::from("/srv/covcert")));
    assert_eq!(Config::resolve(Some(&other)).unwrap().port, 9999);

    std::env::set_var(CONFIG_ENV, dir.path().join("missing.conf"));
    assert!(matches!(Config::resolve(None), Err(ConfigError::Io { .. })));

    std::env::remove_var(CONFIG_ENV);
    assert_eq!(Config::resolve(None).unwrap(), Config::default());
}
