"""Exception hierarchy shared by every vmguard module."""


class VmGuardError(Exception):
    """Base class for all vmguard failures."""


class IllegalTransition(VmGuardError):
    def __init__(self, state, event):
        super().__init__(f"no transition from {state.value} on {event.value}")
        self.state = state
        self.event = event


class MalformedKey(VmGuardError):
    pass


# wire codec
class FrameError(VmGuardError):
    pass


class IncompleteFrame(FrameError):
    pass


class MalformedPayload(FrameError):
    pass


class OversizeFrame(FrameError):
    pass


# server side
class InfeasibleProfile(VmGuardError):
    pass


class UnadmittedNode(VmGuardError):
    pass


class CustodyBroken(VmGuardError):
    pass


class UnknownManifest(VmGuardError):
    pass


class StoreUnreadable(VmGuardError):
    pass


class BundleNotFound(VmGuardError):
    pass


# node side
class IntegrityFailure(VmGuardError):
    pass


class IntegritySelfCheckFailed(IntegrityFailure):
    pass


class TransferFailed(VmGuardError):
    pass


class LinkDown(VmGuardError):
    """The transport to the server is unavailable."""


# simulator
class TargetNotRunning(VmGuardError):
    pass


class ScenarioInvalid(VmGuardError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
