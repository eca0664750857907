class BoostJetError(Exception):
    """Base class for all package errors."""


class ParseError(BoostJetError):
    def __init__(self, line, column, reason, path=None):
        self.line = line
        self.column = column
        self.reason = reason
        self.path = path
        where = f"{path}:" if path else ""
        super().__init__(f"{where}{line}:{column}: {reason}")


class ConfigError(BoostJetError):
    pass


class SchemaError(BoostJetError):
    pass


class ArityError(BoostJetError):
    pass


class UnknownOffer(BoostJetError):
    pass


class OutOfVocab(BoostJetError):
    pass


class EmptyCorpus(BoostJetError):
    pass


class SingleClassPool(BoostJetError):
    pass


class SchemaMismatch(BoostJetError):
    pass


class NoPositives(BoostJetError):
    pass


class LeakageError(BoostJetError):
    pass


class UnknownShop(BoostJetError):
    pass


class UntrainedModel(BoostJetError):
    pass


class EmptyCandidates(BoostJetError):
    pass


class NoTestUsers(BoostJetError):
    pass


class UnknownExperiment(BoostJetError):
    pass


class StaleArtifact(BoostJetError):
    """An upstream artifact was produced under a different config hash."""
