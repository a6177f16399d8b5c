"""
pcinf exit codes

Unlike /usr/include/sysexits.h, pcinf distinguishes only between
bad input (configuration, files, data) and failed computations.
"""

EX_OK = 0  # successful termination
EX_INPUT = 2  # configuration or input error
EX_COMPUTATION = 3  # computation error

EX_IOERROR = EX_INPUT  # I/O Error, e.g. reading prices
EX_INTERRUPTED = EX_COMPUTATION  # pcinf was interrupted during a stage
