use std::ffi::{c_char, CString};
use std::ptr;

use hybrid_auction_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { ha_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

struct Handles {
    setting: *mut HaSetting,
    instance: *mut HaInstance,
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            ha_setting_free(self.setting);
            ha_instance_free(self.instance);
        }
    }
}

/// 2 stores, 2 brands, one slot at CTR 0.5, store 0 linked to brand 1.
fn setting_a() -> Handles {
    let mut h = Handles { setting: ptr::null_mut(), instance: ptr::null_mut() };
    unsafe {
        assert_eq!(ha_setting_new(2, 2, 1, [0.5].as_ptr(), 1, &mut h.setting), HaStatus::Ok);
        assert_eq!(ha_instance_new([1.0, 1.0].as_ptr(), 2, [0u8, 1, 0, 0].as_ptr(), 2, &mut h.instance), HaStatus::Ok);
        assert_eq!(ha_setting_agents(h.setting), 4);
        assert_eq!(ha_setting_slots(h.setting), 1);
    }
    h
}

#[test]
fn vcg_through_the_abi_matches_hand_computation() {
    let h = setting_a();
    let (mut alloc, mut pay) = ([0.0; 4], [0.0; 4]);
    // Bundle (store 0, brand 1) weighs 0.3 + 0.4 = 0.7 and beats store 1's 0.6.
    let bids = [0.3, 0.6, 0.2, 0.4];
    let status = unsafe { ha_vcg_run(h.setting, h.instance, bids.as_ptr(), 4, alloc.as_mut_ptr(), 4, pay.as_mut_ptr(), 4) };
    assert_eq!(status, HaStatus::Ok, "{}", last_error());
    assert_eq!(alloc, [1.0, 0.0, 0.0, 1.0]);
    // Without either bundle member the best alternative is store 1 (0.6),
    // so each pays 0.5 * (0.6 - other member's bid).
    assert!((pay[0] - 0.5 * (0.6 - 0.4)).abs() < 1e-12);
    assert!((pay[3] - 0.5 * (0.6 - 0.3)).abs() < 1e-12);
    assert_eq!(&pay[1..3], &[0.0, 0.0]);
}

#[test]
fn errors_carry_codes_and_messages() {
    let h = setting_a();
    let (mut alloc, mut pay) = ([0.0; 4], [0.0; 4]);
    unsafe {
        let s = ha_vcg_run(h.setting, h.instance, [0.1; 3].as_ptr(), 3, alloc.as_mut_ptr(), 4, pay.as_mut_ptr(), 4);
        assert_eq!(s, HaStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        let s = ha_vcg_run(h.setting, h.instance, [0.1; 4].as_ptr(), 4, alloc.as_mut_ptr(), 3, pay.as_mut_ptr(), 4);
        assert_eq!(s, HaStatus::InvalidArgument);
        let s = ha_vcg_run(ptr::null(), h.instance, [0.1; 4].as_ptr(), 4, alloc.as_mut_ptr(), 4, pay.as_mut_ptr(), 4);
        assert_eq!(s, HaStatus::NullPointer);

        let mut bad = ptr::null_mut();
        assert_eq!(ha_setting_new(2, 2, 3, [0.5].as_ptr(), 1, &mut bad), HaStatus::InvalidArgument);
        assert!(bad.is_null());

        let mut model = ptr::null_mut();
        let path = CString::new("/nonexistent/checkpoint.bin").unwrap();
        assert_eq!(ha_model_load(path.as_ptr(), &mut model), HaStatus::Io);
        assert!(last_error().contains("nonexistent"));

        // A successful call clears the message.
        let s = ha_vcg_run(h.setting, h.instance, [0.1; 4].as_ptr(), 4, alloc.as_mut_ptr(), 4, pay.as_mut_ptr(), 4);
        assert_eq!(s, HaStatus::Ok);
        assert_eq!(ha_last_error(ptr::null_mut(), 0), 0);
    }
}

#[test]
fn trained_model_round_trips_through_checkpoint() {
    use hybrid_auction::checkpoint::{write_checkpoint, Checkpoint};
    use hybrid_auction::data::Preset;
    use hybrid_auction::model::{AuctionInstance, BidProfile};
    use hybrid_auction::network::mechanism_forward;
    use hybrid_auction::train::{TrainConfig, TrainState};

    let setting = Preset::A.setting(1).unwrap();
    let config = TrainConfig { hidden: 8, store_hidden: 4, ..Default::default() };
    let state = TrainState::initial(&setting, &config, 5);
    let ck = Checkpoint { setting: setting.clone(), config, config_hash: "test".into(), state };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    write_checkpoint(&mut std::fs::File::create(&path).unwrap(), &ck).unwrap();

    let h = setting_a();
    let bids = [0.3, 0.6, 0.2, 0.4];
    let (mut alloc, mut pay) = ([0.0; 4], [0.0; 4]);
    unsafe {
        let mut model = ptr::null_mut();
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(ha_model_load(cpath.as_ptr(), &mut model), HaStatus::Ok, "{}", last_error());
        let mut ms = ptr::null_mut();
        assert_eq!(ha_model_setting(model, &mut ms), HaStatus::Ok);
        assert_eq!(ha_setting_agents(ms), 4);
        ha_setting_free(ms);
        let s = ha_model_run(model, h.instance, bids.as_ptr(), 4, alloc.as_mut_ptr(), 4, pay.as_mut_ptr(), 4);
        assert_eq!(s, HaStatus::Ok, "{}", last_error());
        ha_model_free(model);
    }
    let inst = AuctionInstance::new(vec![1.0, 1.0], vec![vec![false, true], vec![false, false]]).unwrap();
    let want = mechanism_forward(&ck.state.params, &setting, &inst, &BidProfile::from_agents(&bids, 2).unwrap()).unwrap();
    assert_eq!(alloc.to_vec(), want.allocation.iter().copied().collect::<Vec<_>>());
    assert_eq!(pay.to_vec(), want.payments);
}
