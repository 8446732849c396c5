use std::path::Path;

use swin_res_net::config::Config;
use swin_res_net::SwinResNet;

#[test]
fn shipped_configs_parse_and_build() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let config = Config::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let geometry = config.model.validate().unwrap();
        assert_eq!(geometry[0].grid, config.model.input_size / config.model.swin.patch_size);
        seen += 1;
    }
    assert!(seen >= 2);
}

#[test]
fn desk_config_keeps_the_default_architecture() {
    let desk = Config::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.conf")).unwrap();
    assert_eq!(desk.model, Config::default().model);
    assert_eq!(desk.train.epochs * 8 / desk.train.batch_size, 200);
    let model = SwinResNet::new(desk.model, desk.precision, 0).unwrap();
    assert_eq!(model.config.res.depths, [4, 6, 9, 2]);
}
