"""Wallet state machine: request building, response handling, recovery.

The wallet is driven against a real server instance; the interesting cases
are the local guards, the persisted-frame retry path, and both halves of the
payment exchange.
"""
import random

import pytest

from opspay import codec, crypto
from opspay.device import OemAuthority
from opspay.errors import ProtocolError, StoreError
from opspay.model import CertKind, DepositConfirmed, MsgKind, Payment, WalletState, WireMessage
from opspay.server import Server
from opspay.ta import SecureStore, TrustedApp
from opspay.wallet import Wallet, pay_verify


@pytest.fixture
def world():
    rng = random.Random(31)
    oem = OemAuthority.create(rng)
    srv = Server(rng)
    srv.trust_oem_root(oem.root_vk)
    return rng, oem, srv


def ok(srv, frame):
    resp, err = srv.handle_frame(frame)
    assert err is None, f"unexpected abort: {err}"
    return codec.decode(resp, WireMessage)


def registered(srv, rng):
    w = Wallet(srv.vk, rng)
    w.on_register_ack(ok(srv, w.begin_register()).body)
    return w


def tee_wallet(srv, oem, rng, fault_hook=None):
    w = Wallet(srv.vk, rng, fault_hook=fault_hook)
    w.on_register_ack(ok(srv, w.begin_register()).body)
    dev = oem.make_device("simdev-9", rng)
    ta = TrustedApp(dev, SecureStore(dev.store_secret), srv.vk, fault_hook=fault_hook)
    w.on_ta_ack(ok(srv, w.begin_ta_setup(ta, rng)).body)
    return w


def funded(srv, oem, rng, mint=100, deposit=40):
    w = tee_wallet(srv, oem, rng)
    srv.mint(w.vk, mint)
    w.on_deposit_confirmed(ok(srv, w.begin_deposit(deposit)).body)
    return w


def transfer_between(payer, receiver, amount):
    req = codec.decode(receiver.request_payment(amount), WireMessage).body
    return codec.decode(payer.make_payment(req), WireMessage).body


# --- local guards ---


def test_register_twice_locally_rejected(world):
    rng, _, srv = world
    w = registered(srv, rng)
    with pytest.raises(ProtocolError) as exc:
        w.begin_register()
    assert exc.value.code == "already registered"


def test_ops_before_registration_rejected(world):
    rng, _, srv = world
    w = Wallet(srv.vk, rng)
    for call in (lambda: w.begin_deposit(1), lambda: w.request_payment(1)):
        with pytest.raises(ProtocolError) as exc:
            call()
        assert exc.value.code in ("not registered", "not activated")


def test_deposit_without_ta_rejected_locally(world):
    rng, _, srv = world
    w = registered(srv, rng)
    with pytest.raises(ProtocolError) as exc:
        w.begin_deposit(5)
    assert exc.value.code == "not activated"


def test_second_request_while_pending_rejected(world):
    rng, oem, srv = world
    w = tee_wallet(srv, oem, rng)
    srv.mint(w.vk, 10)
    w.begin_deposit(5)  # never answered
    with pytest.raises(ProtocolError) as exc:
        w.begin_deposit(5)
    assert exc.value.code == "operation pending"
    with pytest.raises(ProtocolError) as exc:
        w.begin_withdraw(1)
    assert exc.value.code == "operation pending"


def test_register_ack_forgery_rejected(world):
    rng, _, srv = world
    w = Wallet(srv.vk, rng)
    w.begin_register()
    rogue = crypto.keygen(rng)
    from opspay.model import ClientRegisterAck

    forged = ClientRegisterAck(crypto.issue_cert(w.vk, CertKind.UA, rogue.sk))
    with pytest.raises(ProtocolError) as exc:
        w.on_register_ack(forged)
    assert exc.value.code == "bad server cert"
    wrong_subject = ClientRegisterAck(crypto.issue_cert(rogue.vk, CertKind.UA, rogue.sk))
    with pytest.raises(ProtocolError):
        w.on_register_ack(wrong_subject)


# --- deposit recovery ---


def test_deposit_already_applied_counts_as_done(world):
    # wallet crashed between feeding the TA and clearing the pending frame;
    # on restart the retried confirmation must complete, not wedge
    rng, oem, srv = world
    w = tee_wallet(srv, oem, rng)
    srv.mint(w.vk, 50)
    frame = w.begin_deposit(20)
    conf = ok(srv, frame).body
    assert w.ta is not None
    w.ta.deposit(conf.amount, conf.counter, conf.sig)  # applied, pending still set
    w.on_deposit_confirmed(conf)
    assert w.state.pending_frame is None
    assert w.ta.get_balance().balance == 20


def test_unsolicited_deposit_replay_never_recredits(world):
    rng, oem, srv = world
    w = tee_wallet(srv, oem, rng)
    srv.mint(w.vk, 50)
    conf = ok(srv, w.begin_deposit(20)).body
    w.on_deposit_confirmed(conf)
    w.on_deposit_confirmed(conf)  # no pending request: pure replay, no-op
    assert w.ta.get_balance().balance == 20
    # a stale confirmation that is not the exact last one aborts loudly
    forged = DepositConfirmed(conf.amount + 1, conf.counter, conf.sig)
    with pytest.raises(ProtocolError) as exc:
        w.on_deposit_confirmed(forged)
    assert exc.value.code == "counter out of sync"
    assert w.ta.get_balance().balance == 20


# --- withdraw recovery ---


class Boom(Exception):
    pass


def test_withdraw_frame_survives_crash_before_send(world):
    rng, oem, srv = world
    crashes = {"armed": True}

    def hook(point):
        if point == "withdraw:before-send" and crashes["armed"]:
            crashes["armed"] = False
            raise Boom

    w = tee_wallet(srv, oem, rng, fault_hook=hook)
    srv.mint(w.vk, 50)
    w.on_deposit_confirmed(ok(srv, w.begin_deposit(30)).body)
    with pytest.raises(Boom):
        w.begin_withdraw(10)
    # the TA already debited; the signed request frame is the only copy
    assert w.ta.get_balance().balance == 20
    frame = w.retry_pending()
    assert frame is not None
    msg = ok(srv, frame)
    assert msg.kind is MsgKind.WITHDRAW_CONFIRMED
    w.on_withdraw_confirmed()
    assert w.state.pending_frame is None
    assert srv.state.online_balances[w.vk] == 30  # 50 - 30 + 10


def test_retry_emits_identical_bytes(world):
    rng, oem, srv = world
    w = tee_wallet(srv, oem, rng)
    srv.mint(w.vk, 50)
    frame = w.begin_deposit(20)
    assert w.retry_pending() == frame
    assert w.retry_pending() == frame


def test_withdraw_confirmation_recovered_from_ta(world):
    """Crash between the TA persisting the debit and the wallet ever seeing
    the confirmation: the TA's own record is the only copy left."""
    rng, oem, srv = world
    crashes = {"armed": True}

    def hook(point):
        if point == "withdraw:persisted" and crashes["armed"]:
            crashes["armed"] = False
            raise Boom

    w = tee_wallet(srv, oem, rng, fault_hook=hook)
    srv.mint(w.vk, 50)
    w.on_deposit_confirmed(ok(srv, w.begin_deposit(30)).body)
    with pytest.raises(Boom):
        w.begin_withdraw(10)
    assert w.state.pending_frame is None  # the wallet never got the frame
    assert w.ta.get_balance().balance == 20
    # new rounds are refused until the stranded confirmation is settled
    with pytest.raises(ProtocolError) as exc:
        w.begin_deposit(5)
    assert exc.value.code == "operation pending"
    with pytest.raises(ProtocolError):
        w.begin_withdraw(5)
    # retry rebuilds the request from the TA's record and the server accepts
    frame = w.retry_pending()
    assert frame is not None
    assert w.retry_pending() == frame  # stable once rebuilt
    assert ok(srv, frame).kind is MsgKind.WITHDRAW_CONFIRMED
    w.on_withdraw_confirmed()
    assert w.ta.unsettled_withdrawal() is None
    assert srv.state.online_balances[w.vk] == 30
    w.on_deposit_confirmed(ok(srv, w.begin_deposit(5)).body)  # rounds flow again
    assert w.ta.get_balance().balance == 25


# --- payment exchange ---


def test_request_presents_tee_cert_when_active(world):
    rng, oem, srv = world
    w = tee_wallet(srv, oem, rng)
    req = codec.decode(w.request_payment(5), WireMessage).body
    assert req.receiver.kind is CertKind.TA
    plain = registered(srv, rng)
    req2 = codec.decode(plain.request_payment(5), WireMessage).body
    assert req2.receiver.kind is CertKind.UA
    assert req2.receiver.vk == plain.vk


def test_tee_receiver_collects_before_ack(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = tee_wallet(srv, oem, rng)
    transfer = transfer_between(payer, receiver, 25)
    outcome, ack = receiver.on_payment(transfer)
    assert outcome == "accepted"
    assert ack is not None
    assert receiver.ta.get_balance().balance == 25
    assert receiver.state.inbox == []  # nothing left to claim
    payer.on_pay_confirmed()
    assert payer.unacked_payment_frame is None


def test_plain_receiver_stores_payment_for_claim(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = registered(srv, rng)
    transfer = transfer_between(payer, receiver, 10)
    outcome, _ = receiver.on_payment(transfer)
    assert outcome == "accepted"
    assert len(receiver.state.inbox) == 1
    assert pay_verify(receiver.state.inbox[0], srv.vk)


def test_payment_amount_mismatch_rejected(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = registered(srv, rng)
    req = codec.decode(receiver.request_payment(10), WireMessage).body
    from opspay.model import PayReq

    doctored = PayReq(9, req.receiver)  # payer undercuts the agreed amount
    transfer = codec.decode(payer.make_payment(doctored), WireMessage).body
    with pytest.raises(ProtocolError) as exc:
        receiver.on_payment(transfer)
    assert exc.value.code == "amount mismatch"
    assert receiver.state.inbox == []


def test_payment_to_wrong_cert_rejected(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = registered(srv, rng)
    bystander = registered(srv, rng)
    receiver.request_payment(10)
    req_for_other = codec.decode(bystander.request_payment(10), WireMessage).body
    transfer = codec.decode(payer.make_payment(req_for_other), WireMessage).body
    with pytest.raises(ProtocolError) as exc:
        receiver.on_payment(transfer)
    assert exc.value.code == "not addressed to me"


def test_tampered_payment_rejected(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = registered(srv, rng)
    transfer = transfer_between(payer, receiver, 10)
    p = transfer.payment
    from opspay.model import PaymentTransfer

    forged = PaymentTransfer(Payment(p.amount, p.sender, p.receiver, p.index + 1, p.sig))
    with pytest.raises(ProtocolError) as exc:
        receiver.on_payment(forged)
    assert exc.value.code == "invalid payment"


def test_unsolicited_transfer_rejected(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = registered(srv, rng)
    cert = receiver.presented_cert()
    payment = payer.ta.pay(5, cert)
    from opspay.model import PaymentTransfer

    with pytest.raises(ProtocolError) as exc:
        receiver.on_payment(PaymentTransfer(payment))
    assert exc.value.code == "no matching request"


def test_duplicate_transfer_reacked_not_recredited(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = tee_wallet(srv, oem, rng)
    transfer = transfer_between(payer, receiver, 25)
    receiver.on_payment(transfer)
    outcome, ack = receiver.on_payment(transfer)  # ack was lost, sender retries
    assert outcome == "duplicate"
    assert ack is not None
    assert receiver.ta.get_balance().balance == 25


def test_replayed_transfer_during_new_request_rejected(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = tee_wallet(srv, oem, rng)
    transfer = transfer_between(payer, receiver, 25)
    receiver.on_payment(transfer)
    receiver.request_payment(25)  # expecting a fresh payment now
    with pytest.raises(ProtocolError) as exc:
        receiver.on_payment(transfer)
    assert exc.value.code == "already received"
    assert receiver.ta.get_balance().balance == 25


def test_make_payment_rejects_forged_request_cert(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    rogue = crypto.keygen(rng)
    from opspay.model import PayReq

    forged = PayReq(5, crypto.issue_cert(rogue.vk, CertKind.UA, rogue.sk))
    with pytest.raises(ProtocolError) as exc:
        payer.make_payment(forged)
    assert exc.value.code == "bad receiver"
    assert payer.ta.get_balance().balance == 40  # nothing debited


def test_collect_failure_blocks_ack(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = tee_wallet(srv, oem, rng)
    req = codec.decode(receiver.request_payment(25), WireMessage).body
    transfer = codec.decode(payer.make_payment(req), WireMessage).body
    receiver.ta.store.blob = b"\x00" * 60  # flash corruption before delivery
    with pytest.raises(StoreError):
        receiver.on_payment(transfer)
    assert transfer.payment.key() not in receiver.state.received_keys


# --- claim ---


def test_claim_flow_archives_payment(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = registered(srv, rng)
    transfer = transfer_between(payer, receiver, 10)
    receiver.on_payment(transfer)
    payment = receiver.claimable()[0]
    ok(srv, receiver.begin_claim(payment))
    receiver.on_claim_confirmed()
    assert receiver.state.inbox == []
    assert receiver.state.claimed == [payment]
    assert srv.state.online_balances[receiver.vk] == 10


def test_claim_requires_inbox_membership(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = registered(srv, rng)
    cert = receiver.presented_cert()
    stray = payer.ta.pay(5, cert)  # never delivered through on_payment
    with pytest.raises(ProtocolError) as exc:
        receiver.begin_claim(stray)
    assert exc.value.code == "invalid payment"


def test_already_claimed_abort_completes_claim(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = registered(srv, rng)
    transfer = transfer_between(payer, receiver, 10)
    receiver.on_payment(transfer)
    payment = receiver.claimable()[0]
    frame = receiver.begin_claim(payment)
    ok(srv, frame)  # response lost before reaching the wallet
    receiver.on_server_abort(MsgKind.CLAIM_REQ, ProtocolError("x"))  # genuine failure path
    # wallet retries from scratch; server now reports already claimed
    assert payment in receiver.state.inbox
    retry = receiver.begin_claim(payment)
    resp, err = srv.handle_frame(retry)
    if err is None:
        receiver.on_claim_confirmed()
    else:
        assert receiver.on_server_abort(MsgKind.CLAIM_REQ, err) is True
    assert receiver.state.inbox == []
    assert receiver.state.claimed == [payment]
    assert srv.state.online_balances[receiver.vk] == 10


def test_generic_abort_clears_pending(world):
    rng, oem, srv = world
    w = tee_wallet(srv, oem, rng)
    frame = w.begin_deposit(5)  # no funds: server aborts
    resp, err = srv.handle_frame(frame)
    assert err is not None
    assert w.on_server_abort(MsgKind.DEPOSIT_REQ, err) is False
    assert w.state.pending_frame is None
    w2_frame = w.begin_deposit(1)  # wallet is unblocked
    assert w2_frame is not None


# --- persistence ---


def test_wallet_state_roundtrips_through_codec(world):
    rng, oem, srv = world
    payer = funded(srv, oem, rng)
    receiver = registered(srv, rng)
    transfer = transfer_between(payer, receiver, 10)
    receiver.on_payment(transfer)
    receiver.begin_claim(receiver.claimable()[0])
    blob = receiver.save()
    revived = Wallet(srv.vk, rng)
    revived.load(blob)
    assert revived.state == receiver.state
    assert revived.retry_pending() == receiver.retry_pending()


def test_nonces_strictly_increase_across_operations(world):
    rng, oem, srv = world
    w = tee_wallet(srv, oem, rng)
    srv.mint(w.vk, 50)
    seen = []
    for _ in range(3):
        frame = w.begin_deposit(1)
        msg = codec.decode(frame, WireMessage)
        seen.append(msg.auth.nonce)
        w.on_deposit_confirmed(ok(srv, frame).body)
    assert seen == sorted(set(seen))
